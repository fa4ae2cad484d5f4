// Canvas annotation tool. One frame at a time: click to place markers,
// drag within 8 px to move one, right-click to delete, commit to write
// the mask server-side. The spline overlay is always the server's own
// polyline; the client never fits anything itself.

import { ApiError, commitFrame, getMarkers, imageUrl, listFrames, postMarkers } from "./api.js";
import {
  Session,
  applyPreview,
  canCommit,
  deleteMarker,
  dragMarker,
  hitTest,
  isDirty,
  loadMarkers,
  markCommitted,
  markPreviewFailed,
  newSession,
  placeMarker,
} from "./session.js";
import type { FrameInfo } from "./types.js";

const PREVIEW_DEBOUNCE_MS = 150;

interface Elements {
  canvas: HTMLCanvasElement;
  overlay: HTMLCanvasElement;
  frameList: HTMLUListElement;
  commitBtn: HTMLButtonElement;
  prevBtn: HTMLButtonElement;
  nextBtn: HTMLButtonElement;
  brightness: HTMLInputElement;
  contrast: HTMLInputElement;
  status: HTMLSpanElement;
  frameLabel: HTMLSpanElement;
}

function grab(id: string): HTMLElement {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el;
}

export class AnnotatorApp {
  private frames: FrameInfo[] = [];
  private frameIndex = -1;
  private session: Session = newSession();
  private image: HTMLImageElement | null = null;
  private dragIndex = -1;
  private debounceTimer: number | undefined;
  private inflight: AbortController | null = null;
  private readonly el: Elements;

  constructor() {
    this.el = {
      canvas: grab("frame-canvas") as HTMLCanvasElement,
      overlay: grab("overlay-canvas") as HTMLCanvasElement,
      frameList: grab("frame-list") as HTMLUListElement,
      commitBtn: grab("commit-btn") as HTMLButtonElement,
      prevBtn: grab("prev-btn") as HTMLButtonElement,
      nextBtn: grab("next-btn") as HTMLButtonElement,
      brightness: grab("brightness") as HTMLInputElement,
      contrast: grab("contrast") as HTMLInputElement,
      status: grab("status") as HTMLSpanElement,
      frameLabel: grab("frame-label") as HTMLSpanElement,
    };
    this.wireEvents();
  }

  async start(): Promise<void> {
    const res = await listFrames();
    this.frames = res.frames;
    this.renderFrameList();
    if (this.frames.length > 0) await this.openFrame(0);
    else this.setStatus("no frames in data directory");
  }

  // ----- frame navigation ------------------------------------------------

  private async openFrame(index: number): Promise<void> {
    if (index < 0 || index >= this.frames.length) return;
    this.cancelPreview();
    this.frameIndex = index;
    this.session = newSession();
    const frame = this.frames[index]!;
    this.el.frameLabel.textContent = frame.id;

    this.image = await this.loadImage(imageUrl(frame.id));
    this.el.canvas.width = this.image.naturalWidth;
    this.el.canvas.height = this.image.naturalHeight;
    this.el.overlay.width = this.image.naturalWidth;
    this.el.overlay.height = this.image.naturalHeight;

    const stored = await getMarkers(frame.id);
    if (stored) {
      loadMarkers(this.session, stored.markers);
      // re-request the curve for the stored markers so the overlay comes
      // back; this does not make the frame dirty
      this.requestPreviewNow();
    }
    this.drawFrame();
    this.drawOverlay();
    this.updateControls();
    this.renderFrameList();
  }

  private loadImage(url: string): Promise<HTMLImageElement> {
    return new Promise((resolve, reject) => {
      const img = new Image();
      img.onload = () => resolve(img);
      img.onerror = () => reject(new Error(`failed to load ${url}`));
      img.src = url;
    });
  }

  private async navigate(delta: number): Promise<void> {
    const target = this.frameIndex + delta;
    if (target < 0 || target >= this.frames.length) return;
    if (isDirty(this.session) && !window.confirm("Discard unsaved marker edits?")) return;
    await this.openFrame(target);
  }

  // ----- events -----------------------------------------------------------

  private wireEvents(): void {
    const overlay = this.el.overlay;
    overlay.addEventListener("pointerdown", (ev) => this.onPointerDown(ev));
    overlay.addEventListener("pointermove", (ev) => this.onPointerMove(ev));
    overlay.addEventListener("pointerup", (ev) => this.onPointerUp(ev));
    overlay.addEventListener("contextmenu", (ev) => this.onRightClick(ev));

    this.el.commitBtn.addEventListener("click", () => void this.commit());
    this.el.prevBtn.addEventListener("click", () => void this.navigate(-1));
    this.el.nextBtn.addEventListener("click", () => void this.navigate(1));

    document.addEventListener("keydown", (ev) => {
      if (ev.target instanceof HTMLInputElement) return;
      if (ev.key === "ArrowLeft") void this.navigate(-1);
      else if (ev.key === "ArrowRight") void this.navigate(1);
      else if (ev.key === "Enter" && !this.el.commitBtn.disabled) void this.commit();
    });

    // display-only enhancement: a CSS filter on the canvas element; the
    // bitmap (and anything committed) is untouched
    const applyFilter = () => {
      const b = Number(this.el.brightness.value);
      const c = Number(this.el.contrast.value);
      this.el.canvas.style.filter = `brightness(${b}%) contrast(${c}%)`;
    };
    this.el.brightness.addEventListener("input", applyFilter);
    this.el.contrast.addEventListener("input", applyFilter);
  }

  private canvasPoint(ev: PointerEvent | MouseEvent): { x: number; y: number; zoom: number } {
    const rect = this.el.overlay.getBoundingClientRect();
    const zoom = rect.width / this.el.overlay.width;
    return { x: (ev.clientX - rect.left) / zoom, y: (ev.clientY - rect.top) / zoom, zoom };
  }

  private onPointerDown(ev: PointerEvent): void {
    if (ev.button !== 0 || !this.image) return;
    const { x, y, zoom } = this.canvasPoint(ev);
    const hit = hitTest(this.session.markers, x, y, zoom);
    if (hit >= 0) {
      this.dragIndex = hit;
      this.el.overlay.setPointerCapture(ev.pointerId);
    } else {
      placeMarker(this.session, x, y);
      this.afterEdit();
    }
  }

  private onPointerMove(ev: PointerEvent): void {
    if (this.dragIndex < 0) return;
    const { x, y } = this.canvasPoint(ev);
    dragMarker(this.session, this.dragIndex, x, y);
    this.afterEdit();
  }

  private onPointerUp(ev: PointerEvent): void {
    if (this.dragIndex >= 0) this.el.overlay.releasePointerCapture(ev.pointerId);
    this.dragIndex = -1;
  }

  private onRightClick(ev: MouseEvent): void {
    ev.preventDefault();
    const { x, y, zoom } = this.canvasPoint(ev);
    const hit = hitTest(this.session.markers, x, y, zoom);
    if (hit >= 0) {
      deleteMarker(this.session, hit);
      this.afterEdit();
    }
  }

  // ----- preview ----------------------------------------------------------

  private afterEdit(): void {
    this.drawOverlay();
    this.updateControls();
    if (this.debounceTimer !== undefined) window.clearTimeout(this.debounceTimer);
    this.debounceTimer = window.setTimeout(() => this.requestPreviewNow(), PREVIEW_DEBOUNCE_MS);
  }

  private cancelPreview(): void {
    if (this.debounceTimer !== undefined) window.clearTimeout(this.debounceTimer);
    this.debounceTimer = undefined;
    this.inflight?.abort();
    this.inflight = null;
  }

  private requestPreviewNow(): void {
    const frame = this.frames[this.frameIndex];
    if (!frame || this.session.markers.length < 2) {
      this.drawOverlay();
      return;
    }
    // a newer edit supersedes any request still in flight
    this.inflight?.abort();
    const ctrl = new AbortController();
    this.inflight = ctrl;
    const version = this.session.version;
    const markers = this.session.markers.map((m) => [m.x, m.y] as [number, number]);
    postMarkers(frame.id, markers, ctrl.signal)
      .then((res) => {
        if (applyPreview(this.session, version, res.polyline)) {
          frame.annotated = true;
          this.renderFrameList();
          this.drawOverlay();
          this.setStatus("");
        }
      })
      .catch((err) => {
        if (ctrl.signal.aborted) return; // superseded, not a failure
        markPreviewFailed(this.session, version);
        this.drawOverlay();
        this.setStatus(err instanceof ApiError ? `preview failed: ${err.message}` : "server unreachable");
      });
  }

  // ----- commit -----------------------------------------------------------

  private async commit(): Promise<void> {
    const frame = this.frames[this.frameIndex];
    if (!frame || !canCommit(this.session)) return;
    try {
      // persist the exact markers being committed before rasterizing
      const markers = this.session.markers.map((m) => [m.x, m.y] as [number, number]);
      await postMarkers(frame.id, markers);
      const res = await commitFrame(frame.id);
      markCommitted(this.session);
      frame.annotated = true;
      frame.committed = true;
      this.renderFrameList();
      this.updateControls();
      this.setStatus(res.clipped ? `committed ${res.mask} (curve clipped at frame edge)` : `committed ${res.mask}`);
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        if (window.confirm("Another commit is in progress for this frame. Retry?")) void this.commit();
        return;
      }
      this.setStatus(err instanceof ApiError ? `commit failed: ${err.message}` : "server unreachable");
    }
  }

  // ----- rendering ----------------------------------------------------------

  private drawFrame(): void {
    const ctx = this.el.canvas.getContext("2d");
    if (!ctx || !this.image) return;
    ctx.clearRect(0, 0, this.el.canvas.width, this.el.canvas.height);
    ctx.drawImage(this.image, 0, 0);
  }

  private drawOverlay(): void {
    const ctx = this.el.overlay.getContext("2d");
    if (!ctx) return;
    ctx.clearRect(0, 0, this.el.overlay.width, this.el.overlay.height);

    const poly = this.session.preview;
    if (poly && poly.length > 1 && this.session.markers.length >= 2) {
      ctx.strokeStyle = this.session.previewStale ? "rgba(255,165,0,0.9)" : "rgba(0,200,120,0.9)";
      ctx.lineWidth = 1.5;
      ctx.beginPath();
      const first = poly[0]!;
      ctx.moveTo(first[0], first[1]);
      for (const [px, py] of poly.slice(1)) ctx.lineTo(px, py);
      ctx.stroke();
    }

    ctx.fillStyle = "rgba(230,126,34,0.95)";
    ctx.strokeStyle = "white";
    for (const m of this.session.markers) {
      ctx.beginPath();
      ctx.arc(m.x, m.y, 3, 0, 2 * Math.PI);
      ctx.fill();
      ctx.stroke();
    }
  }

  private renderFrameList(): void {
    this.el.frameList.replaceChildren(
      ...this.frames.map((f, i) => {
        const li = document.createElement("li");
        li.textContent = f.id;
        li.className = i === this.frameIndex ? "current" : "";
        const badge = document.createElement("span");
        badge.className = "badge";
        badge.textContent = f.committed ? "mask" : f.annotated ? "markers" : "";
        li.appendChild(badge);
        li.addEventListener("click", () => {
          if (!isDirty(this.session) || window.confirm("Discard unsaved marker edits?")) {
            void this.openFrame(i);
          }
        });
        return li;
      }),
    );
  }

  private updateControls(): void {
    this.el.commitBtn.disabled = !canCommit(this.session);
    this.el.prevBtn.disabled = this.frameIndex <= 0;
    this.el.nextBtn.disabled = this.frameIndex >= this.frames.length - 1;
  }

  private setStatus(text: string): void {
    this.el.status.textContent = text;
  }
}

const app = new AnnotatorApp();
void app.start();
