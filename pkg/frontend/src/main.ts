/**
 * DOM wiring for the editor page: file upload, side-by-side image panels,
 * metric badges, mask overlay toggle and one slider per direction.
 *
 * All image math happens server-side; this file only moves base64 payloads
 * between the service and <img>/<canvas> elements.
 */

import { ApiClient } from "./api.js";
import { EditorController, UiState } from "./controller.js";

const params = new URLSearchParams(window.location.search);
const BASE_URL = params.get("api") ?? "http://127.0.0.1:8765";

const client = new ApiClient(BASE_URL);
const controller = new EditorController(client);

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

const fileInput = el<HTMLInputElement>("file-input");
const statusLine = el<HTMLDivElement>("status");
const originalImg = el<HTMLImageElement>("original");
const inversionImg = el<HTMLImageElement>("inversion");
const blendedImg = el<HTMLImageElement>("blended");
const overlayCanvas = el<HTMLCanvasElement>("overlay");
const overlayToggle = el<HTMLInputElement>("overlay-toggle");
const badges = el<HTMLDivElement>("badges");
const slidersBox = el<HTMLDivElement>("sliders");
const historyBox = el<HTMLDivElement>("history");

function pngUrl(b64: string): string {
  return `data:image/png;base64,${b64}`;
}

function readFileAsBase64(file: File): Promise<string> {
  return new Promise((resolve, reject) => {
    const reader = new FileReader();
    reader.onload = () => {
      const url = reader.result as string;
      resolve(url.substring(url.indexOf(",") + 1));
    };
    reader.onerror = () => reject(reader.error);
    reader.readAsDataURL(file);
  });
}

function drawOverlay(state: UiState): void {
  const ctx = overlayCanvas.getContext("2d");
  if (!ctx) return;
  ctx.clearRect(0, 0, overlayCanvas.width, overlayCanvas.height);
  if (!state.originalPng || state.maskOverlayOpacity <= 0 || !state.maskPng) return;
  const base = new Image();
  base.onload = () => {
    overlayCanvas.width = base.width;
    overlayCanvas.height = base.height;
    ctx.drawImage(base, 0, 0);
    const mask = new Image();
    mask.onload = () => {
      // tint the OOD region: mask luminance becomes red-channel alpha
      const off = document.createElement("canvas");
      off.width = base.width;
      off.height = base.height;
      const octx = off.getContext("2d");
      if (!octx) return;
      octx.drawImage(mask, 0, 0, off.width, off.height);
      const data = octx.getImageData(0, 0, off.width, off.height);
      for (let i = 0; i < data.data.length; i += 4) {
        const v = data.data[i];
        data.data[i] = 255;
        data.data[i + 1] = 32;
        data.data[i + 2] = 32;
        data.data[i + 3] = Math.round(v * state.maskOverlayOpacity);
      }
      octx.putImageData(data, 0, 0);
      ctx.drawImage(off, 0, 0);
    };
    mask.src = pngUrl(state.maskPng!);
  };
  base.src = pngUrl(state.originalPng);
}

function buildSliders(state: UiState): void {
  slidersBox.innerHTML = "";
  for (const d of state.directions) {
    const row = document.createElement("div");
    row.className = "slider-row";
    const label = document.createElement("label");
    label.textContent = d.name;
    const input = document.createElement("input");
    input.type = "range";
    input.min = String(d.suggested_range[0]);
    input.max = String(d.suggested_range[1]);
    input.step = "0.05";
    input.value = String(state.sliderValues[d.name] ?? 0);
    input.disabled = state.sessionExpired;
    const valueSpan = document.createElement("span");
    valueSpan.textContent = Number(input.value).toFixed(2);
    input.addEventListener("input", () => {
      valueSpan.textContent = Number(input.value).toFixed(2);
      controller.onSliderChange(d.name, parseFloat(input.value));
    });
    row.append(label, input, valueSpan);
    slidersBox.appendChild(row);
  }
}

function render(state: UiState): void {
  statusLine.textContent = state.lastError
    ? state.lastError
    : state.pendingRequest
      ? "working..."
      : state.sessionId
        ? "ready"
        : "upload a square PNG or JPEG to start";
  statusLine.classList.toggle("error", state.lastError !== null);

  if (state.originalPng) originalImg.src = pngUrl(state.originalPng);
  if (state.inversionPng) inversionImg.src = pngUrl(state.inversionPng);
  if (state.editedPng) blendedImg.src = pngUrl(state.editedPng);

  if (state.metrics) {
    badges.innerHTML = "";
    const items: Array<[string, string]> = [
      ["PSNR", `${state.metrics.psnr.toFixed(2)} dB`],
      ["SSIM", state.metrics.ssim.toFixed(3)],
      ["OOD area", `${(state.metrics.aoa * 100).toFixed(1)}%`],
    ];
    for (const [k, v] of items) {
      const b = document.createElement("span");
      b.className = "badge";
      b.textContent = `${k} ${v}`;
      badges.appendChild(b);
    }
  }

  const sliderInputs = slidersBox.querySelectorAll("input");
  if (sliderInputs.length !== state.directions.length) {
    buildSliders(state);
  } else {
    sliderInputs.forEach((i) => ((i as HTMLInputElement).disabled = state.sessionExpired));
  }

  historyBox.innerHTML = "";
  for (const h of [...state.history].reverse()) {
    const card = document.createElement("div");
    card.className = "history-card";
    const img = document.createElement("img");
    img.src = pngUrl(h.editedPng);
    const cap = document.createElement("div");
    cap.textContent = `${h.direction} ${h.strength.toFixed(2)}`;
    card.append(img, cap);
    historyBox.appendChild(card);
  }

  drawOverlay(state);
}

controller.onChange(render);

fileInput.addEventListener("change", async () => {
  const file = fileInput.files?.[0];
  if (!file) return;
  const b64 = await readFileAsBase64(file);
  await controller.uploadAndInvert(b64);
});

overlayToggle.addEventListener("change", () => {
  controller.setMaskOverlayOpacity(overlayToggle.checked ? 0.6 : 0);
});

void client
  .health()
  .then((h) => {
    statusLine.textContent = `service ready (checkpoint ${h.checkpoint_id})`;
  })
  .catch(() => {
    statusLine.textContent = `cannot reach service at ${BASE_URL}`;
    statusLine.classList.add("error");
  });
