// Rating loop: one matchup at a time, keyboard-driven, exactly one POST per
// displayed matchup. The rater only ever sees the two images — no
// checkpoint or guidance-scale provenance reaches the UI.

import { ApiClient, MatchupView } from "./api.js";

export interface SessionOptions {
  pollDelayMs?: number;
  blinkMs?: number;
}

export class RatingSession {
  private current: MatchupView | null = null;
  private submitting = false;
  private stopped = false;
  private blinkTimer: number | undefined;
  private blinkShowRight = false;
  private zoom = 1;
  private panX = 0;
  private panY = 0;
  private dragFrom: { x: number; y: number } | null = null;
  private readonly pollDelayMs: number;
  private readonly blinkMs: number;
  private keydownHandler = (ev: KeyboardEvent) => this.onKey(ev);

  constructor(
    private root: HTMLElement,
    private api: ApiClient,
    private rater: string,
    opts: SessionOptions = {},
  ) {
    this.pollDelayMs = opts.pollDelayMs ?? 1500;
    this.blinkMs = opts.blinkMs ?? 450;
  }

  async start(): Promise<void> {
    this.renderSkeleton();
    window.addEventListener("keydown", this.keydownHandler);
    await this.advance();
  }

  stop(): void {
    this.stopped = true;
    window.removeEventListener("keydown", this.keydownHandler);
    this.stopBlink();
  }

  /** Exposed for tests: the matchup currently on screen. */
  get displayed(): MatchupView | null {
    return this.current;
  }

  // ---- loop

  private async advance(): Promise<void> {
    if (this.stopped) return;
    this.current = null;
    this.submitting = false;
    try {
      const m = await this.api.next(this.rater);
      if (this.stopped) return;
      if (m === null) {
        await this.showIdleOrDone();
        return;
      }
      this.current = m;
      this.renderMatchup(m);
    } catch {
      this.showBanner("Connection lost while fetching the next pair.", () => this.advance());
    }
  }

  private async showIdleOrDone(): Promise<void> {
    let allDone = false;
    try {
      const status = await this.api.status();
      const groups = Object.values(status);
      allDone = groups.length > 0 && groups.every((g) => g.complete);
    } catch {
      this.showBanner("Connection lost while fetching status.", () => this.advance());
      return;
    }
    if (allDone) {
      this.renderDone();
      return;
    }
    // other raters hold the remaining matchups; poll again shortly
    this.renderWaiting();
    if (!this.stopped) {
      setTimeout(() => void this.advance(), this.pollDelayMs);
    }
  }

  async choose(side: "left" | "right"): Promise<void> {
    if (this.current === null || this.submitting) return; // double-keypress guard
    const id = this.current.matchup_id;
    this.submitting = true;
    try {
      await this.api.choose(id, side, this.rater);
      // "ok" and "conflict" both mean this matchup is settled server-side
      await this.advance();
    } catch {
      // keep the pair on screen; nothing is auto-resubmitted
      this.submitting = false;
      this.showBanner("Could not submit the choice. Press the arrow key to retry.");
    }
  }

  // ---- keyboard

  private onKey(ev: KeyboardEvent): void {
    if (ev.key === "ArrowLeft") {
      ev.preventDefault();
      void this.choose("left");
    } else if (ev.key === "ArrowRight") {
      ev.preventDefault();
      void this.choose("right");
    } else if (ev.key === "b" || ev.key === "B") {
      ev.preventDefault();
      this.toggleBlink();
    } else if (ev.key === "z" || ev.key === "Z") {
      ev.preventDefault();
      this.cycleZoom();
    }
  }

  // ---- rendering

  private el<K extends keyof HTMLElementTagNameMap>(tag: K, cls: string): HTMLElementTagNameMap[K] {
    const e = document.createElement(tag);
    e.className = cls;
    return e;
  }

  private renderSkeleton(): void {
    this.root.innerHTML = "";
    const header = this.el("div", "bl-header");
    header.textContent = "Pick the better reconstruction: ← left, → right. B toggles blink-compare, Z zooms.";
    const banner = this.el("div", "bl-banner");
    banner.style.display = "none";
    const stage = this.el("div", "bl-stage");
    const progress = this.el("div", "bl-progress");
    this.root.append(header, banner, stage, progress);
  }

  private stage(): HTMLElement {
    return this.root.querySelector(".bl-stage") as HTMLElement;
  }

  private showBanner(text: string, retry?: () => void): void {
    const banner = this.root.querySelector(".bl-banner") as HTMLElement;
    banner.textContent = text;
    banner.style.display = "block";
    if (retry) {
      const b = this.el("button", "bl-retry");
      b.textContent = "Retry";
      b.onclick = () => {
        banner.style.display = "none";
        retry();
      };
      banner.append(" ", b);
    }
  }

  private hideBanner(): void {
    const banner = this.root.querySelector(".bl-banner") as HTMLElement;
    banner.style.display = "none";
    banner.textContent = "";
  }

  private renderMatchup(m: MatchupView): void {
    this.stopBlink();
    this.hideBanner();
    this.panX = 0;
    this.panY = 0;
    const stage = this.stage();
    stage.innerHTML = "";
    const pair = this.el("div", "bl-pair");
    for (const [side, url] of [["left", m.left_png_url], ["right", m.right_png_url]] as const) {
      const cell = this.el("figure", `bl-cell bl-${side}`);
      const img = this.el("img", "bl-img");
      img.src = url;
      img.draggable = false;
      const cap = this.el("figcaption", "bl-cap");
      cap.textContent = side === "left" ? "← left" : "right →";
      cell.append(img, cap);
      pair.append(cell);
      // dragging either pane pans both in lockstep
      img.addEventListener("pointerdown", (ev) => {
        this.dragFrom = { x: ev.clientX - this.panX, y: ev.clientY - this.panY };
        img.setPointerCapture(ev.pointerId);
      });
      img.addEventListener("pointermove", (ev) => {
        if (this.dragFrom === null) return;
        this.panX = ev.clientX - this.dragFrom.x;
        this.panY = ev.clientY - this.dragFrom.y;
        this.applyView();
      });
      img.addEventListener("pointerup", () => {
        this.dragFrom = null;
      });
    }
    stage.append(pair);
    this.applyView();
    const progress = this.root.querySelector(".bl-progress") as HTMLElement;
    progress.textContent = `group ${m.group} · ${(m.progress * 100).toFixed(0)}% decided`;
  }

  /** One shared zoom/pan transform for both panes. */
  private applyView(): void {
    const t = `translate(${this.panX}px, ${this.panY}px) scale(${this.zoom})`;
    for (const img of Array.from(this.root.querySelectorAll<HTMLImageElement>(".bl-img"))) {
      img.style.transform = t;
    }
  }

  private renderWaiting(): void {
    this.stage().innerHTML = '<p class="bl-waiting">Waiting for a free matchup…</p>';
  }

  private renderDone(): void {
    this.stopBlink();
    this.stage().innerHTML = '<p class="bl-done">All comparisons are done. Thank you!</p>';
    const progress = this.root.querySelector(".bl-progress") as HTMLElement;
    progress.textContent = "100% decided";
  }

  // ---- blink compare: alternate the two images in one spot

  private toggleBlink(): void {
    if (this.blinkTimer !== undefined) {
      this.stopBlink();
      if (this.current) this.renderMatchup(this.current);
      return;
    }
    const pair = this.stage().querySelector(".bl-pair") as HTMLElement | null;
    if (!pair) return;
    pair.classList.add("bl-blink");
    this.blinkTimer = setInterval(() => {
      this.blinkShowRight = !this.blinkShowRight;
      pair.classList.toggle("bl-show-right", this.blinkShowRight);
    }, this.blinkMs) as unknown as number;
  }

  private stopBlink(): void {
    if (this.blinkTimer !== undefined) {
      clearInterval(this.blinkTimer);
      this.blinkTimer = undefined;
    }
    this.blinkShowRight = false;
  }

  private cycleZoom(): void {
    this.zoom = this.zoom >= 3 ? 1 : this.zoom + 1; // integer zoom only
    if (this.zoom === 1) {
      this.panX = 0;
      this.panY = 0;
    }
    this.applyView();
  }
}
