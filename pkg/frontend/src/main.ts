/**
 * Browser entry point: wires the API client and session controller to a
 * canvas viewer with prompt tools, run history, and an error banner.
 *
 * Rendering rule: the canvas never relies on CSS scaling.  Image and overlay
 * are drawn through one explicit view transform (zoom + pan), and every
 * pointer event is mapped back to image pixels through its inverse.
 */

import { ApiClient, SliceSummary } from "./api.js";
import { maskToRgba } from "./overlay.js";
import {
  identityTransform,
  imageToView,
  panBy,
  ViewTransform,
  viewToPixel,
  zoomAt,
} from "./transform.js";
import { HistoryEntry, maskDiff, SessionController } from "./session.js";

type Tool = "point-pos" | "point-neg" | "box" | "pan";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  if (text !== undefined) node.textContent = text;
  return node;
}

function pngToImage(b64: string): Promise<HTMLImageElement> {
  return new Promise((resolve, reject) => {
    const img = new Image();
    img.onload = () => resolve(img);
    img.onerror = () => reject(new Error("failed to decode slice image"));
    img.src = `data:image/png;base64,${b64}`;
  });
}

class Viewer {
  readonly canvas: HTMLCanvasElement;
  transform: ViewTransform = identityTransform();
  tool: Tool = "point-pos";
  selectedEntry: number | null = null;
  compareEntry: number | null = null;

  private imageLayer: CanvasImageSource | null = null;
  private dragStart: { x: number; y: number } | null = null;
  private dragNow: { x: number; y: number } | null = null;
  private flash: { x: number; y: number; until: number } | null = null;

  constructor(
    private readonly session: SessionController,
    private readonly onChange: () => void,
  ) {
    this.canvas = el("canvas", { width: "640", height: "640", class: "viewer" });
    this.canvas.addEventListener("pointerdown", (e) => this.onDown(e));
    this.canvas.addEventListener("pointermove", (e) => this.onMove(e));
    this.canvas.addEventListener("pointerup", (e) => this.onUp(e));
    this.canvas.addEventListener("wheel", (e) => this.onWheel(e), { passive: false });
  }

  setImage(source: CanvasImageSource, shape: [number, number]): void {
    const [h, w] = shape;
    this.imageLayer = source;
    const fit = Math.min(this.canvas.width / w, this.canvas.height / h);
    this.transform = { zoom: fit, panX: 0, panY: 0 };
    this.selectedEntry = null;
    this.compareEntry = null;
    this.draw();
  }

  private canvasPos(e: PointerEvent | WheelEvent): { x: number; y: number } {
    const rect = this.canvas.getBoundingClientRect();
    return { x: e.clientX - rect.left, y: e.clientY - rect.top };
  }

  private onDown(e: PointerEvent): void {
    const pos = this.canvasPos(e);
    if (this.tool === "pan" || this.tool === "box") {
      this.dragStart = pos;
      this.dragNow = pos;
      this.canvas.setPointerCapture(e.pointerId);
      return;
    }
    if (!this.session.slice) return;
    const [h, w] = this.session.slice.shape;
    const px = viewToPixel(this.transform, pos.x, pos.y, w, h);
    if (!px) {
      // out-of-image click: flash a marker, change nothing
      this.flash = { x: pos.x, y: pos.y, until: performance.now() + 400 };
      this.draw();
      setTimeout(() => this.draw(), 450);
      return;
    }
    const label = this.tool === "point-neg" ? "negative" : "positive";
    if (this.session.placePoint(px.x, px.y, label)) this.onChange();
  }

  private onMove(e: PointerEvent): void {
    if (!this.dragStart) return;
    const pos = this.canvasPos(e);
    if (this.tool === "pan") {
      this.transform = panBy(this.transform, pos.x - (this.dragNow?.x ?? pos.x), pos.y - (this.dragNow?.y ?? pos.y));
    }
    this.dragNow = pos;
    this.draw();
  }

  private onUp(e: PointerEvent): void {
    if (!this.dragStart || !this.dragNow) {
      this.dragStart = this.dragNow = null;
      return;
    }
    if (this.tool === "box" && this.session.slice) {
      const [h, w] = this.session.slice.shape;
      const a = viewToPixel(this.transform, this.dragStart.x, this.dragStart.y, w, h);
      const b = viewToPixel(this.transform, this.dragNow.x, this.dragNow.y, w, h);
      if (a && b) {
        // boxes are half-open on the far edge, so extend by one pixel
        const x0 = Math.min(a.x, b.x);
        const y0 = Math.min(a.y, b.y);
        const x1 = Math.max(a.x, b.x) + 1;
        const y1 = Math.max(a.y, b.y) + 1;
        if (this.session.drawBox(x0, y0, x1, y1)) this.onChange();
      } else {
        this.flash = { x: this.dragNow.x, y: this.dragNow.y, until: performance.now() + 400 };
        setTimeout(() => this.draw(), 450);
      }
    }
    this.dragStart = this.dragNow = null;
    this.canvas.releasePointerCapture(e.pointerId);
    this.draw();
  }

  private onWheel(e: WheelEvent): void {
    e.preventDefault();
    const pos = this.canvasPos(e);
    const factor = e.deltaY < 0 ? 1.2 : 1 / 1.2;
    this.transform = zoomAt(this.transform, factor, pos.x, pos.y);
    this.draw();
  }

  draw(): void {
    const ctx = this.canvas.getContext("2d");
    if (!ctx) return;
    ctx.setTransform(1, 0, 0, 1, 0, 0);
    ctx.fillStyle = "#14161a";
    ctx.fillRect(0, 0, this.canvas.width, this.canvas.height);
    if (!this.imageLayer || !this.session.slice) return;

    const t = this.transform;
    ctx.imageSmoothingEnabled = false;
    ctx.setTransform(t.zoom, 0, 0, t.zoom, t.panX, t.panY);
    ctx.drawImage(this.imageLayer, 0, 0);

    const entry = this.currentEntry();
    if (entry) {
      const [h, w] = entry.shape;
      const layer = el("canvas", { width: String(w), height: String(h) });
      const lctx = layer.getContext("2d");
      if (lctx) {
        lctx.putImageData(new ImageData(maskToRgba(entry.mask, entry.shape), w, h), 0, 0);
        ctx.drawImage(layer, 0, 0);
      }
    }

    // prompt markers drawn in view space so strokes stay 1px wide
    ctx.setTransform(1, 0, 0, 1, 0, 0);
    for (const p of this.session.prompts.points) {
      const v = imageToView(t, p.x + 0.5, p.y + 0.5);
      ctx.beginPath();
      ctx.arc(v.x, v.y, 5, 0, Math.PI * 2);
      ctx.fillStyle = p.label === "positive" ? "#4caf50" : "#e53935";
      ctx.fill();
      ctx.strokeStyle = "#ffffff";
      ctx.stroke();
    }
    for (const b of this.session.prompts.boxes) {
      const v0 = imageToView(t, b.x0, b.y0);
      const v1 = imageToView(t, b.x1, b.y1);
      ctx.strokeStyle = "#64b5f6";
      ctx.lineWidth = 2;
      ctx.strokeRect(v0.x, v0.y, v1.x - v0.x, v1.y - v0.y);
    }
    if (this.dragStart && this.dragNow && this.tool === "box") {
      ctx.strokeStyle = "#64b5f6";
      ctx.setLineDash([4, 3]);
      ctx.strokeRect(
        this.dragStart.x,
        this.dragStart.y,
        this.dragNow.x - this.dragStart.x,
        this.dragNow.y - this.dragStart.y,
      );
      ctx.setLineDash([]);
    }
    if (this.flash && performance.now() < this.flash.until) {
      ctx.beginPath();
      ctx.arc(this.flash.x, this.flash.y, 9, 0, Math.PI * 2);
      ctx.strokeStyle = "#ffb300";
      ctx.lineWidth = 2;
      ctx.stroke();
    }
  }

  private currentEntry(): HistoryEntry | null {
    const h = this.session.history;
    if (h.length === 0) return null;
    const idx = this.selectedEntry ?? h.length - 1;
    return h[idx] ?? null;
  }
}

async function boot(): Promise<void> {
  const params = new URLSearchParams(location.search);
  const base = params.get("api") ?? `${location.protocol}//${location.host}`;
  const api = new ApiClient(base);
  const session = new SessionController(api);

  const app = el("div", { class: "app" });
  const banner = el("div", { class: "banner", hidden: "" });
  const toolbar = el("div", { class: "toolbar" });
  const sliceSelect = el("select", { class: "slices" });
  const textInput = el("input", { type: "text", placeholder: "text prompt" });
  const runBtn = el("button", {}, "Run");
  const undoBtn = el("button", {}, "Undo");
  const redoBtn = el("button", {}, "Redo");
  const clearBtn = el("button", {}, "Clear");
  const historyList = el("ol", { class: "history" });
  const status = el("div", { class: "status" });

  const tools: [Tool, string][] = [
    ["point-pos", "+ point"],
    ["point-neg", "- point"],
    ["box", "box"],
    ["pan", "pan"],
  ];
  const toolButtons = new Map<Tool, HTMLButtonElement>();

  const viewer = new Viewer(session, () => refresh());

  function showError(): void {
    if (session.lastError) {
      const { code, message, field } = session.lastError;
      banner.textContent = field ? `${code}: ${message} (field: ${field})` : `${code}: ${message}`;
      banner.removeAttribute("hidden");
    } else {
      banner.setAttribute("hidden", "");
    }
  }

  function refresh(): void {
    runBtn.toggleAttribute("disabled", !session.canRun());
    undoBtn.toggleAttribute("disabled", !session.canUndo());
    redoBtn.toggleAttribute("disabled", !session.canRedo());
    for (const [tool, btn] of toolButtons) {
      btn.classList.toggle("active", viewer.tool === tool);
    }
    historyList.replaceChildren(
      ...session.history.map((entry, i) => {
        const li = el("li", {});
        const label = `run ${i + 1}: ${entry.prompts.points.length}pt ${entry.prompts.boxes.length}box` +
          (entry.prompts.text ? ` "${entry.prompts.text}"` : "") +
          (entry.dscVsReference !== null ? ` dsc=${entry.dscVsReference.toFixed(3)}` : "") +
          ` ${entry.timingMs.toFixed(0)}ms`;
        const pick = el("button", {}, label);
        pick.addEventListener("click", () => {
          viewer.selectedEntry = i;
          refresh();
        });
        li.append(pick);
        if (viewer.selectedEntry === i) li.classList.add("selected");
        if (viewer.compareEntry !== null && viewer.selectedEntry !== null) {
          const a = session.history[viewer.compareEntry];
          const b = session.history[viewer.selectedEntry];
          if (i === viewer.compareEntry && a && b) {
            li.append(el("span", { class: "diff" }, ` diff=${maskDiff(a, b)}px`));
          }
        }
        const cmp = el("button", { class: "small" }, "compare");
        cmp.addEventListener("click", () => {
          viewer.compareEntry = viewer.compareEntry === i ? null : i;
          refresh();
        });
        li.append(cmp);
        return li;
      }),
    );
    showError();
    viewer.draw();
  }

  for (const [tool, label] of tools) {
    const btn = el("button", {}, label);
    btn.addEventListener("click", () => {
      viewer.tool = tool;
      refresh();
    });
    toolButtons.set(tool, btn);
    toolbar.append(btn);
  }
  toolbar.append(textInput, runBtn, undoBtn, redoBtn, clearBtn);

  textInput.addEventListener("change", () => {
    session.setText(textInput.value);
    refresh();
  });
  runBtn.addEventListener("click", () => {
    void session.run().then(() => refresh());
    refresh();
  });
  undoBtn.addEventListener("click", () => {
    session.undo();
    textInput.value = session.prompts.text ?? "";
    refresh();
  });
  redoBtn.addEventListener("click", () => {
    session.redo();
    textInput.value = session.prompts.text ?? "";
    refresh();
  });
  clearBtn.addEventListener("click", () => {
    session.clearPrompts();
    textInput.value = "";
    refresh();
  });

  async function loadSelected(): Promise<void> {
    const id = sliceSelect.value;
    if (!id) return;
    const detail = await session.loadSlice(datasetName, id);
    viewer.setImage(await pngToImage(detail.image_b64), detail.shape);
    textInput.value = "";
    status.textContent = `${detail.id} (${detail.organ_name}, ${detail.shape[0]}x${detail.shape[1]})`;
    refresh();
  }
  sliceSelect.addEventListener("change", () => void loadSelected());

  app.append(banner, toolbar, sliceSelect, viewer.canvas, status, historyList);
  document.body.append(app);

  let datasetName = params.get("dataset") ?? "synth";
  try {
    const model = await api.getModel();
    status.textContent = `model ${model.checkpoint_id.slice(0, 12)} (${model.ablation})`;
    const list = await api.listSlices(datasetName, 0, 200);
    sliceSelect.replaceChildren(
      ...list.slices.map((s: SliceSummary) => el("option", { value: s.id }, s.id)),
    );
    if (list.slices.length > 0) await loadSelected();
  } catch (err) {
    session.lastError = {
      code: "startup",
      message: err instanceof Error ? err.message : String(err),
    };
    showError();
  }
}

if (typeof document !== "undefined") {
  void boot();
}
