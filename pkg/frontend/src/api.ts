/**
 * Typed client for the /v1 inversion service.
 *
 * The shapes here mirror shared/api_contract.json; the contract test on
 * each side of the wire checks against that file.
 */

export interface InvertResponse {
  session_id: string;
  inversion_png: string;
  blended_png: string;
  mask_png: string;
  psnr: number;
  ssim: number;
  aoa: number;
}

export interface EditResponse {
  edited_png: string;
  mask_png: string;
}

export interface DirectionInfo {
  name: string;
  suggested_range: [number, number];
}

export interface DirectionsResponse {
  directions: DirectionInfo[];
}

export interface HealthResponse {
  status: string;
  checkpoint_id: string;
}

export interface ApiError {
  status: number;
  code: string;
  message: string;
}

export class ServiceError extends Error {
  readonly status: number;
  readonly code: string;

  constructor(err: ApiError) {
    super(err.message);
    this.status = err.status;
    this.code = err.code;
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

async function parseError(resp: Response): Promise<ServiceError> {
  let code = "unknown";
  let message = `request failed with status ${resp.status}`;
  try {
    const body = await resp.json();
    if (body && body.detail) {
      code = body.detail.code ?? code;
      message = body.detail.message ?? message;
    }
  } catch {
    // non-JSON error body; keep the defaults
  }
  return new ServiceError({ status: resp.status, code, message });
}

export class ApiClient {
  private readonly base: string;
  private readonly fetchImpl: FetchLike;

  constructor(baseUrl: string, fetchImpl?: FetchLike) {
    this.base = baseUrl.replace(/\/+$/, "");
    this.fetchImpl = fetchImpl ?? ((url, init) => fetch(url, init));
  }

  private async post<T>(path: string, body: unknown): Promise<T> {
    const resp = await this.fetchImpl(`${this.base}${path}`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!resp.ok) throw await parseError(resp);
    return (await resp.json()) as T;
  }

  private async get<T>(path: string): Promise<T> {
    const resp = await this.fetchImpl(`${this.base}${path}`);
    if (!resp.ok) throw await parseError(resp);
    return (await resp.json()) as T;
  }

  invert(imageB64: string): Promise<InvertResponse> {
    return this.post<InvertResponse>("/v1/invert", { image_b64: imageB64 });
  }

  edit(sessionId: string, direction: string, strength: number): Promise<EditResponse> {
    return this.post<EditResponse>("/v1/edit", {
      session_id: sessionId,
      direction,
      strength,
    });
  }

  directions(): Promise<DirectionsResponse> {
    return this.get<DirectionsResponse>("/v1/directions");
  }

  health(): Promise<HealthResponse> {
    return this.get<HealthResponse>("/v1/health");
  }
}
