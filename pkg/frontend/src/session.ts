/**
 * Session state for one loaded slice: the working prompt set, an append-only
 * run history, and undo/redo over prompt edits.
 *
 * The server is stateless, so every run resubmits the full prompt set.  At most
 * one segment request is in flight; run() calls that arrive while one is
 * pending coalesce so that only the latest prompt set is sent afterwards.
 */

import {
  ApiClient,
  ApiRequestError,
  BoxOut,
  PointOut,
  SegmentResponse,
  SliceDetail,
} from "./api.js";
import { rleDecode, Shape2D } from "./rle.js";

export interface PromptSet {
  points: PointOut[];
  boxes: BoxOut[];
  text: string | null;
}

export interface HistoryEntry {
  prompts: PromptSet;
  rle: number[];
  shape: Shape2D;
  mask: Uint8Array;
  dscVsReference: number | null;
  timingMs: number;
}

export interface SessionError {
  code: string;
  message: string;
  field?: string;
}

export function emptyPrompts(): PromptSet {
  return { points: [], boxes: [], text: null };
}

export function clonePrompts(p: PromptSet): PromptSet {
  return {
    points: p.points.map((pt) => ({ ...pt })),
    boxes: p.boxes.map((b) => ({ ...b })),
    text: p.text,
  };
}

export class SessionController {
  slice: SliceDetail | null = null;
  prompts: PromptSet = emptyPrompts();
  readonly history: HistoryEntry[] = [];
  lastError: SessionError | null = null;

  private undoStack: PromptSet[] = [];
  private redoStack: PromptSet[] = [];
  private inFlight: Promise<void> | null = null;
  private runQueued = false;

  constructor(private readonly api: ApiClient) {}

  async loadSlice(dataset: string, sliceId: string): Promise<SliceDetail> {
    const detail = await this.api.getSlice(dataset, sliceId);
    this.slice = detail;
    this.prompts = emptyPrompts();
    this.history.length = 0;
    this.undoStack = [];
    this.redoStack = [];
    this.lastError = null;
    return detail;
  }

  private snapshot(): void {
    this.undoStack.push(clonePrompts(this.prompts));
    this.redoStack = [];
  }

  /** Add a point prompt; returns false (no edit) when outside the image. */
  placePoint(x: number, y: number, label: "positive" | "negative"): boolean {
    if (!this.slice) return false;
    const [h, w] = this.slice.shape;
    if (!Number.isInteger(x) || !Number.isInteger(y)) return false;
    if (x < 0 || y < 0 || x >= w || y >= h) return false;
    this.snapshot();
    this.prompts.points.push({ x, y, label });
    return true;
  }

  /** Add a box prompt; returns false (no edit) for zero-area boxes. */
  drawBox(x0: number, y0: number, x1: number, y1: number): boolean {
    if (!this.slice) return false;
    const [h, w] = this.slice.shape;
    const lo = { x: Math.min(x0, x1), y: Math.min(y0, y1) };
    const hi = { x: Math.max(x0, x1), y: Math.max(y0, y1) };
    if (hi.x <= lo.x || hi.y <= lo.y) return false;
    if (lo.x < 0 || lo.y < 0 || hi.x > w || hi.y > h) return false;
    this.snapshot();
    this.prompts.boxes.push({ x0: lo.x, y0: lo.y, x1: hi.x, y1: hi.y });
    return true;
  }

  setText(text: string | null): void {
    const next = text && text.trim().length > 0 ? text : null;
    if (next === this.prompts.text) return;
    this.snapshot();
    this.prompts.text = next;
  }

  clearPrompts(): void {
    this.snapshot();
    this.prompts = emptyPrompts();
  }

  canUndo(): boolean {
    return this.undoStack.length > 0;
  }

  canRedo(): boolean {
    return this.redoStack.length > 0;
  }

  undo(): boolean {
    const prev = this.undoStack.pop();
    if (!prev) return false;
    this.redoStack.push(clonePrompts(this.prompts));
    this.prompts = prev;
    return true;
  }

  redo(): boolean {
    const next = this.redoStack.pop();
    if (!next) return false;
    this.undoStack.push(clonePrompts(this.prompts));
    this.prompts = next;
    return true;
  }

  canRun(): boolean {
    return (
      this.slice !== null &&
      (this.prompts.points.length > 0 ||
        this.prompts.boxes.length > 0 ||
        (this.prompts.text !== null && this.prompts.text.length > 0))
    );
  }

  /**
   * Run segmentation with the current prompts.  While a request is pending,
   * further calls mark a rerun and resolve with the same in-flight promise;
   * once the pending request finishes, exactly one more request goes out with
   * whatever the prompts are by then.
   */
  run(): Promise<void> {
    if (this.inFlight) {
      this.runQueued = true;
      return this.inFlight;
    }
    this.inFlight = this.drainRuns().finally(() => {
      this.inFlight = null;
    });
    return this.inFlight;
  }

  private async drainRuns(): Promise<void> {
    do {
      this.runQueued = false;
      await this.runOnce();
    } while (this.runQueued);
  }

  private async runOnce(): Promise<void> {
    if (!this.slice || !this.canRun()) return;
    const prompts = clonePrompts(this.prompts);
    let res: SegmentResponse;
    try {
      res = await this.api.segment({
        image_ref: { dataset: this.slice.dataset, slice_id: this.slice.id },
        points: prompts.points,
        boxes: prompts.boxes,
        text: prompts.text,
      });
    } catch (err) {
      if (err instanceof ApiRequestError) {
        this.lastError = { code: err.code, message: err.message, field: err.field };
      } else {
        this.lastError = { code: "unknown", message: String(err) };
      }
      return;
    }
    this.lastError = null;
    this.history.push({
      prompts,
      rle: res.mask.rle,
      shape: res.mask.shape,
      mask: rleDecode(res.mask.rle, res.mask.shape),
      dscVsReference: res.dsc_vs_reference,
      timingMs: res.timing_ms,
    });
  }
}

/** Count pixels that differ between two history entries' masks. */
export function maskDiff(a: HistoryEntry, b: HistoryEntry): number {
  if (a.shape[0] !== b.shape[0] || a.shape[1] !== b.shape[1]) {
    throw new Error("cannot compare masks of different shapes");
  }
  let n = 0;
  for (let i = 0; i < a.mask.length; i++) {
    if (a.mask[i] !== b.mask[i]) n++;
  }
  return n;
}
