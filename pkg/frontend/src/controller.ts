/**
 * Editor state machine, kept free of DOM so it can be unit-tested.
 *
 * Slider moves are debounced (150 ms, trailing edge) into /edit calls; only
 * one request is in flight per session and responses are reconciled by
 * sequence number, so a stale response can never overwrite a newer edit.
 */

import {
  DirectionInfo,
  DirectionsResponse,
  EditResponse,
  InvertResponse,
  ServiceError,
} from "./api.js";

export const EDIT_DEBOUNCE_MS = 150;
export const HISTORY_LENGTH = 3;

/** The slice of the service API the editor needs; ApiClient satisfies it. */
export interface EditorApi {
  invert(imageB64: string): Promise<InvertResponse>;
  edit(sessionId: string, direction: string, strength: number): Promise<EditResponse>;
  directions(): Promise<DirectionsResponse>;
}

export interface HistoryEntry {
  direction: string;
  strength: number;
  editedPng: string;
}

export interface UiState {
  sessionId: string | null;
  originalPng: string | null;
  inversionPng: string | null;
  blendedPng: string | null;
  editedPng: string | null;
  maskPng: string | null;
  maskOverlayOpacity: number;
  metrics: { psnr: number; ssim: number; aoa: number } | null;
  directions: DirectionInfo[];
  sliderValues: Record<string, number>;
  pendingRequest: boolean;
  sessionExpired: boolean;
  lastError: string | null;
  history: HistoryEntry[];
}

export function initialState(): UiState {
  return {
    sessionId: null,
    originalPng: null,
    inversionPng: null,
    blendedPng: null,
    editedPng: null,
    maskPng: null,
    maskOverlayOpacity: 0,
    metrics: null,
    directions: [],
    sliderValues: {},
    pendingRequest: false,
    sessionExpired: false,
    lastError: null,
    history: [],
  };
}

type Listener = (state: UiState) => void;

export class EditorController {
  readonly state: UiState = initialState();

  private readonly client: EditorApi;
  private readonly debounceMs: number;
  private listeners: Listener[] = [];
  private debounceTimer: ReturnType<typeof setTimeout> | null = null;
  private nextSeq = 0;
  private appliedSeq = -1;
  private inFlight = false;
  private queued: { direction: string; strength: number } | null = null;

  constructor(client: EditorApi, debounceMs: number = EDIT_DEBOUNCE_MS) {
    this.client = client;
    this.debounceMs = debounceMs;
  }

  onChange(listener: Listener): void {
    this.listeners.push(listener);
  }

  private notify(): void {
    for (const l of this.listeners) l(this.state);
  }

  /** Upload an image, run inversion, and populate the sliders. */
  async uploadAndInvert(imageB64: string): Promise<void> {
    this.state.pendingRequest = true;
    this.state.lastError = null;
    this.state.sessionExpired = false;
    this.notify();
    try {
      const inv = await this.client.invert(imageB64);
      const dirs = await this.client.directions();
      this.state.sessionId = inv.session_id;
      this.state.originalPng = imageB64;
      this.state.inversionPng = inv.inversion_png;
      this.state.blendedPng = inv.blended_png;
      this.state.editedPng = inv.blended_png;
      this.state.maskPng = inv.mask_png;
      this.state.metrics = { psnr: inv.psnr, ssim: inv.ssim, aoa: inv.aoa };
      this.state.directions = dirs.directions;
      this.state.sliderValues = {};
      for (const d of dirs.directions) this.state.sliderValues[d.name] = 0;
      this.state.history = [];
      this.appliedSeq = -1;
      this.nextSeq = 0;
    } catch (e) {
      this.state.lastError = e instanceof Error ? e.message : String(e);
    } finally {
      this.state.pendingRequest = false;
      this.notify();
    }
  }

  /** Debounced slider handler; the latest value wins. */
  onSliderChange(direction: string, value: number): void {
    if (!this.state.sessionId || this.state.sessionExpired) return;
    const info = this.state.directions.find((d) => d.name === direction);
    if (info) {
      const [lo, hi] = info.suggested_range;
      value = Math.min(hi, Math.max(lo, value));
    }
    this.state.sliderValues[direction] = value;
    this.notify();
    if (this.debounceTimer !== null) clearTimeout(this.debounceTimer);
    this.debounceTimer = setTimeout(() => {
      this.debounceTimer = null;
      void this.requestEdit(direction, value);
    }, this.debounceMs);
  }

  setMaskOverlayOpacity(opacity: number): void {
    this.state.maskOverlayOpacity = Math.min(1, Math.max(0, opacity));
    this.notify();
  }

  private async requestEdit(direction: string, strength: number): Promise<void> {
    if (this.inFlight) {
      // one request per session at a time; remember only the newest value
      this.queued = { direction, strength };
      return;
    }
    const seq = this.nextSeq++;
    this.inFlight = true;
    this.state.pendingRequest = true;
    this.notify();
    try {
      const sessionId = this.state.sessionId;
      if (!sessionId) return;
      const resp = await this.client.edit(sessionId, direction, strength);
      // apply only when this is the newest request and no newer slider
      // value is waiting; otherwise the queued request will supersede it
      if (seq > this.appliedSeq && this.queued === null) {
        this.appliedSeq = seq;
        this.state.editedPng = resp.edited_png;
        this.state.maskPng = resp.mask_png;
        this.pushHistory({ direction, strength, editedPng: resp.edited_png });
      }
    } catch (e) {
      if (e instanceof ServiceError && e.status === 404) {
        this.state.sessionExpired = true;
        this.state.lastError = "session expired; upload the image again";
      } else {
        this.state.lastError = e instanceof Error ? e.message : String(e);
      }
    } finally {
      this.inFlight = false;
      this.state.pendingRequest = false;
      this.notify();
      const queued = this.queued;
      this.queued = null;
      if (queued && !this.state.sessionExpired) {
        void this.requestEdit(queued.direction, queued.strength);
      }
    }
  }

  private pushHistory(entry: HistoryEntry): void {
    this.state.history.push(entry);
    if (this.state.history.length > HISTORY_LENGTH) {
      this.state.history.splice(0, this.state.history.length - HISTORY_LENGTH);
    }
  }
}
