import { ApiClient } from "./api.js";
import { paintPayload } from "./imaging.js";
import {
  clickThumb,
  describeRef,
  historyModels,
  Selection,
  swapSelection,
  tileModels,
} from "./state.js";
import type { DatasetItem, SessionState, WireRef } from "./types.js";

const TILE_PX = 160;
const THUMB_PX = 48;
const PAGE_SIZE = 24;

function el<K extends keyof HTMLElementTagNameMap>(
  doc: Document,
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = doc.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

/**
 * Render the per-seed output grid. Badges mirror the service's satisfaction
 * booleans one-to-one; a payload that fails validation becomes an error tile
 * without breaking the rest of the grid.
 */
export function renderOutputs(
  doc: Document,
  state: SessionState,
  onMoreLike: ((seed: number) => void) | null,
): HTMLElement {
  const grid = el(doc, "div", "seed-grid");
  for (const tile of tileModels(state)) {
    const cell = el(doc, "div", "seed-tile");
    cell.dataset.seed = String(tile.seedIndex);
    cell.appendChild(el(doc, "div", "tile-label", `seed ${tile.seedIndex}`));
    if (tile.error) {
      const err = el(doc, "div", "tile-error", `bad payload: ${tile.error}`);
      err.dataset.role = "error";
      cell.appendChild(err);
    } else if (tile.image) {
      const canvas = el(doc, "canvas", "tile-canvas");
      canvas.width = TILE_PX;
      canvas.height = TILE_PX;
      paintPayload(canvas, tile.image);
      cell.appendChild(canvas);
    } else {
      cell.appendChild(el(doc, "div", "tile-empty", "no output yet"));
    }
    const badges = el(doc, "div", "badge-row");
    tile.badges.forEach((ok, i) => {
      const badge = el(doc, "span", ok ? "badge badge-ok" : "badge badge-bad");
      badge.dataset.constraint = String(i);
      badge.dataset.satisfied = String(ok);
      badge.title = `constraint ${i + 1}: ${ok ? "satisfied" : "violated"}`;
      badges.appendChild(badge);
    });
    cell.appendChild(badges);
    if (tile.phi) {
      const coords = tile.phi.map((v) => v.toFixed(3)).join(", ");
      cell.appendChild(el(doc, "div", "tile-phi", `phi: [${coords}]`));
    }
    if (onMoreLike && tile.image && !tile.error) {
      const btn = el(doc, "button", "more-like", "more like selected than this");
      btn.dataset.action = "more-like";
      btn.addEventListener("click", () => onMoreLike(tile.seedIndex));
      cell.appendChild(btn);
    }
    grid.appendChild(cell);
  }
  return grid;
}

export function renderHistory(doc: Document, state: SessionState): HTMLElement {
  const list = el(doc, "ol", "history");
  for (const item of historyModels(state)) {
    const row = el(doc, "li", "history-row");
    row.dataset.index = String(item.index);
    const posThumb = el(doc, "canvas", "history-thumb thumb-pos");
    posThumb.width = THUMB_PX;
    posThumb.height = THUMB_PX;
    paintPayload(posThumb, item.pos.image);
    const negThumb = el(doc, "canvas", "history-thumb thumb-neg");
    negThumb.width = THUMB_PX;
    negThumb.height = THUMB_PX;
    paintPayload(negThumb, item.neg.image);
    row.appendChild(el(doc, "span", "history-label", `${item.index + 1}.`));
    row.appendChild(el(doc, "span", "", "more like"));
    row.appendChild(posThumb);
    row.appendChild(el(doc, "span", "", `${describeRef(item.pos)} than`));
    row.appendChild(negThumb);
    row.appendChild(el(doc, "span", "", describeRef(item.neg)));
    list.appendChild(row);
  }
  return list;
}

export interface AppHooks {
  onError?: (message: string) => void;
  onState?: (state: SessionState) => void;
}

/** Single-page controller: one session, one in-flight mutation at a time. */
export class App {
  doc: Document;
  api: ApiClient;
  root: HTMLElement;
  state: SessionState | null = null;
  selection: Selection = { pos: null, neg: null };
  page = 0;
  pageItems: DatasetItem[] = [];
  total = 0;
  pending = false;
  hooks: AppHooks;

  constructor(root: HTMLElement, api: ApiClient, hooks: AppHooks = {}) {
    this.root = root;
    this.doc = root.ownerDocument;
    this.api = api;
    this.hooks = hooks;
  }

  async start(checkpointId: string, nSeeds = 3, rngSeed?: number): Promise<void> {
    this.state = await this.api.createSession(checkpointId, nSeeds, rngSeed);
    await this.loadPage(0);
    this.render();
  }

  async resume(sessionId: string): Promise<void> {
    this.state = await this.api.getSession(sessionId);
    await this.loadPage(0);
    this.render();
  }

  async loadPage(page: number): Promise<void> {
    const data = await this.api.listImages(page * PAGE_SIZE, PAGE_SIZE);
    this.page = page;
    this.pageItems = data.items;
    this.total = data.total;
  }

  private async mutate(fn: () => Promise<SessionState>): Promise<void> {
    if (this.pending || !this.state) return;
    this.pending = true;
    this.render();
    try {
      this.state = await fn();
      this.hooks.onState?.(this.state);
    } catch (e) {
      this.hooks.onError?.(String(e));
      this.lastError = String(e);
    } finally {
      this.pending = false;
      this.render();
    }
  }

  lastError: string | null = null;

  submitPair(): Promise<void> {
    const { pos, neg } = this.selection;
    if (pos === null || neg === null) {
      this.hooks.onError?.("pick a positive and a negative thumbnail first");
      return Promise.resolve();
    }
    return this.mutate(() =>
      this.api.addConstraint(this.state!.session_id, { dataset: pos }, { dataset: neg }),
    );
  }

  /** "More like the selected image than this seed's previous output." */
  submitMoreLike(seed: number): Promise<void> {
    const pos = this.selection.pos;
    if (pos === null) {
      this.hooks.onError?.("pick a positive thumbnail first");
      return Promise.resolve();
    }
    if (!this.state?.outputs) {
      this.hooks.onError?.("no previous output to compare against");
      return Promise.resolve();
    }
    const posRef: WireRef = { dataset: pos };
    const negRef: WireRef = { previous_output: seed };
    return this.mutate(() =>
      this.api.addConstraint(this.state!.session_id, posRef, negRef),
    );
  }

  undo(): Promise<void> {
    return this.mutate(() => this.api.undo(this.state!.session_id));
  }

  clickThumbnail(id: number): void {
    this.selection = clickThumb(this.selection, id);
    this.render();
  }

  swap(): void {
    this.selection = swapSelection(this.selection);
    this.render();
  }

  render(): void {
    if (!this.state) return;
    const doc = this.doc;
    this.root.textContent = "";

    const header = el(doc, "div", "header");
    header.appendChild(
      el(doc, "span", "session-label",
         `session ${this.state.session_id} · checkpoint ${this.state.checkpoint_id}`),
    );
    if (this.lastError) {
      const err = el(doc, "span", "error-banner", this.lastError);
      err.dataset.role = "error-banner";
      header.appendChild(err);
    }
    this.root.appendChild(header);

    const main = el(doc, "div", "main");

    // thumbnail browser
    const browser = el(doc, "div", "browser");
    browser.appendChild(el(doc, "div", "panel-title", "dataset images"));
    const thumbs = el(doc, "div", "thumb-grid");
    for (const item of this.pageItems) {
      const wrap = el(doc, "div", "thumb");
      wrap.dataset.imageId = String(item.id);
      if (this.selection.pos === item.id) wrap.classList.add("selected-pos");
      if (this.selection.neg === item.id) wrap.classList.add("selected-neg");
      const canvas = el(doc, "canvas", "thumb-canvas");
      canvas.width = THUMB_PX;
      canvas.height = THUMB_PX;
      paintPayload(canvas, item.image);
      wrap.appendChild(canvas);
      wrap.appendChild(el(doc, "div", "thumb-id", `#${item.id}`));
      wrap.addEventListener("click", () => this.clickThumbnail(item.id));
      thumbs.appendChild(wrap);
    }
    browser.appendChild(thumbs);

    const pager = el(doc, "div", "pager");
    const prev = el(doc, "button", "", "prev");
    prev.disabled = this.page === 0;
    prev.addEventListener("click", () => void this.loadPage(this.page - 1).then(() => this.render()));
    const next = el(doc, "button", "", "next");
    next.disabled = (this.page + 1) * PAGE_SIZE >= this.total;
    next.addEventListener("click", () => void this.loadPage(this.page + 1).then(() => this.render()));
    pager.appendChild(prev);
    pager.appendChild(
      el(doc, "span", "page-label",
         `${this.page * PAGE_SIZE + 1}-${Math.min((this.page + 1) * PAGE_SIZE, this.total)} of ${this.total}`),
    );
    pager.appendChild(next);
    browser.appendChild(pager);

    // selection + actions
    const controls = el(doc, "div", "controls");
    const selLabel =
      `positive: ${this.selection.pos === null ? "—" : "#" + this.selection.pos} · ` +
      `negative: ${this.selection.neg === null ? "—" : "#" + this.selection.neg}`;
    const sel = el(doc, "div", "selection", selLabel);
    sel.dataset.role = "selection";
    controls.appendChild(sel);
    const swapBtn = el(doc, "button", "", "swap");
    swapBtn.dataset.action = "swap";
    swapBtn.addEventListener("click", () => this.swap());
    const submitBtn = el(doc, "button", "", "add constraint");
    submitBtn.dataset.action = "submit-pair";
    submitBtn.disabled = this.pending;
    submitBtn.addEventListener("click", () => void this.submitPair());
    const undoBtn = el(doc, "button", "", "undo");
    undoBtn.dataset.action = "undo";
    undoBtn.disabled = this.pending || this.state.history.length === 0;
    undoBtn.addEventListener("click", () => void this.undo());
    controls.appendChild(swapBtn);
    controls.appendChild(submitBtn);
    controls.appendChild(undoBtn);
    browser.appendChild(controls);
    main.appendChild(browser);

    // outputs + history
    const right = el(doc, "div", "outputs");
    right.appendChild(el(doc, "div", "panel-title", "generated (one per seed)"));
    right.appendChild(
      renderOutputs(doc, this.state, this.pending ? null : (seed) => void this.submitMoreLike(seed)),
    );
    right.appendChild(el(doc, "div", "panel-title", "constraint history"));
    right.appendChild(renderHistory(doc, this.state));
    main.appendChild(right);
    this.root.appendChild(main);
  }
}
