/**
 * Typed client for the segmentation service /v1 endpoints.
 *
 * Responses are validated field-by-field before use; a malformed payload
 * or an error envelope both surface as ApiRequestError with a non-empty
 * message (and the offending field when the server names one).
 */

export interface ModelInfo {
  ablation: string;
  checkpoint_id: string;
  config_hash: string;
  image_size: number;
  parameters: number;
  supported_prompts: string[];
}

export interface SliceSummary {
  id: string;
  organ_id: number;
  split: string;
  has_reference: boolean;
}

export interface SliceList {
  dataset: string;
  total: number;
  offset: number;
  limit: number;
  slices: SliceSummary[];
}

export interface SliceDetail {
  id: string;
  dataset: string;
  shape: [number, number];
  image_b64: string;
  organ_id: number;
  organ_name: string;
  text_prompt: string;
  has_reference: boolean;
}

export interface PointOut {
  x: number;
  y: number;
  label: string;
}

export interface BoxOut {
  x0: number;
  y0: number;
  x1: number;
  y1: number;
}

export interface SegmentRequest {
  image_ref: { image_b64?: string; dataset?: string; slice_id?: string };
  points: PointOut[];
  boxes: BoxOut[];
  text: string | null;
  threshold?: number;
  allow_silent?: boolean;
}

export interface SegmentResponse {
  mask: { shape: [number, number]; rle: number[] };
  dsc_vs_reference: number | null;
  model_info: { ablation: string; checkpoint_id: string; config_hash: string };
  timing_ms: number;
}

export class ApiRequestError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
    readonly field?: string,
  ) {
    super(message || `request failed with status ${status}`);
    this.name = "ApiRequestError";
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

// -- response shape guards ---------------------------------------------------

function asObject(v: unknown, what: string): Record<string, unknown> {
  if (typeof v !== "object" || v === null || Array.isArray(v)) {
    throw new ApiRequestError(0, "bad_response", `${what}: expected an object`);
  }
  return v as Record<string, unknown>;
}

function asNumber(v: unknown, what: string): number {
  if (typeof v !== "number" || !Number.isFinite(v)) {
    throw new ApiRequestError(0, "bad_response", `${what}: expected a number, got ${typeof v}`);
  }
  return v;
}

function asString(v: unknown, what: string): string {
  if (typeof v !== "string") {
    throw new ApiRequestError(0, "bad_response", `${what}: expected a string, got ${typeof v}`);
  }
  return v;
}

function asNumberArray(v: unknown, what: string): number[] {
  if (!Array.isArray(v) || v.some((x) => typeof x !== "number")) {
    throw new ApiRequestError(0, "bad_response", `${what}: expected a number array`);
  }
  return v as number[];
}

function asShape2D(v: unknown, what: string): [number, number] {
  const arr = asNumberArray(v, what);
  if (arr.length !== 2) {
    throw new ApiRequestError(0, "bad_response", `${what}: expected [height, width]`);
  }
  return [arr[0] as number, arr[1] as number];
}

// -- client ------------------------------------------------------------------

export class ApiClient {
  private readonly base: string;
  private readonly doFetch: FetchLike;

  constructor(baseUrl: string, fetchFn?: FetchLike) {
    this.base = baseUrl.replace(/\/+$/, "");
    this.doFetch = fetchFn ?? ((input, init) => globalThis.fetch(input, init));
  }

  private async request(path: string, init?: RequestInit): Promise<unknown> {
    let res: Response;
    try {
      res = await this.doFetch(this.base + path, init);
    } catch (err) {
      const reason = err instanceof Error ? err.message : String(err);
      throw new ApiRequestError(0, "network", `cannot reach ${this.base}: ${reason}`);
    }
    let doc: unknown = null;
    try {
      doc = await res.json();
    } catch {
      // fall through: non-JSON bodies handled below
    }
    if (!res.ok) {
      const body = (doc ?? {}) as Record<string, unknown>;
      throw new ApiRequestError(
        res.status,
        typeof body.code === "string" ? body.code : "http_error",
        typeof body.message === "string" ? body.message : `HTTP ${res.status}`,
        typeof body.field === "string" ? body.field : undefined,
      );
    }
    if (doc === null) {
      throw new ApiRequestError(0, "bad_response", "response body is not JSON");
    }
    return doc;
  }

  async getModel(): Promise<ModelInfo> {
    const doc = asObject(await this.request("/v1/model"), "model info");
    return {
      ablation: asString(doc.ablation, "ablation"),
      checkpoint_id: asString(doc.checkpoint_id, "checkpoint_id"),
      config_hash: asString(doc.config_hash, "config_hash"),
      image_size: asNumber(doc.image_size, "image_size"),
      parameters: asNumber(doc.parameters, "parameters"),
      supported_prompts: (doc.supported_prompts as string[]) ?? [],
    };
  }

  async listSlices(dataset: string, offset = 0, limit = 50): Promise<SliceList> {
    const q = new URLSearchParams({
      dataset,
      offset: String(offset),
      limit: String(limit),
    });
    const doc = asObject(await this.request(`/v1/slices?${q}`), "slice list");
    const slices = (Array.isArray(doc.slices) ? doc.slices : []).map((raw, i) => {
      const s = asObject(raw, `slices[${i}]`);
      return {
        id: asString(s.id, "slice id"),
        organ_id: asNumber(s.organ_id, "organ_id"),
        split: asString(s.split, "split"),
        has_reference: Boolean(s.has_reference),
      };
    });
    return {
      dataset: asString(doc.dataset, "dataset"),
      total: asNumber(doc.total, "total"),
      offset: asNumber(doc.offset, "offset"),
      limit: asNumber(doc.limit, "limit"),
      slices,
    };
  }

  async getSlice(dataset: string, sliceId: string): Promise<SliceDetail> {
    // slice ids contain path separators; keep them as path segments
    const encoded = sliceId.split("/").map(encodeURIComponent).join("/");
    const q = new URLSearchParams({ dataset });
    const doc = asObject(await this.request(`/v1/slices/${encoded}?${q}`), "slice detail");
    return {
      id: asString(doc.id, "id"),
      dataset: asString(doc.dataset, "dataset"),
      shape: asShape2D(doc.shape, "shape"),
      image_b64: asString(doc.image_b64, "image_b64"),
      organ_id: asNumber(doc.organ_id, "organ_id"),
      organ_name: asString(doc.organ_name, "organ_name"),
      text_prompt: asString(doc.text_prompt, "text_prompt"),
      has_reference: Boolean(doc.has_reference),
    };
  }

  async segment(body: SegmentRequest): Promise<SegmentResponse> {
    const doc = asObject(
      await this.request("/v1/segment", {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(body),
      }),
      "segment response",
    );
    const mask = asObject(doc.mask, "mask");
    const modelInfo = asObject(doc.model_info, "model_info");
    return {
      mask: {
        shape: asShape2D(mask.shape, "mask.shape"),
        rle: asNumberArray(mask.rle, "mask.rle"),
      },
      dsc_vs_reference:
        doc.dsc_vs_reference === null ? null : asNumber(doc.dsc_vs_reference, "dsc_vs_reference"),
      model_info: {
        ablation: asString(modelInfo.ablation, "ablation"),
        checkpoint_id: asString(modelInfo.checkpoint_id, "checkpoint_id"),
        config_hash: asString(modelInfo.config_hash, "config_hash"),
      },
      timing_ms: asNumber(doc.timing_ms, "timing_ms"),
    };
  }
}
