import type { ImagePayload, RefDisplay, SessionState } from "./types.js";
import { decodeRgb8, PayloadError } from "./imaging.js";

/** Everything one seed slot needs to render. */
export interface TileModel {
  seedIndex: number;
  image: ImagePayload | null;
  /** Service-reported satisfaction per constraint; never recomputed here. */
  badges: boolean[];
  phi: number[] | null;
  error: string | null;
}

export interface HistoryModel {
  index: number;
  pos: RefDisplay & { image: ImagePayload };
  neg: RefDisplay & { image: ImagePayload };
}

/** Pure projection of the service state onto the seed grid. */
export function tileModels(state: SessionState): TileModel[] {
  const tiles: TileModel[] = [];
  for (let seed = 0; seed < state.n_seeds; seed++) {
    const image = state.outputs?.[seed] ?? null;
    let error: string | null = null;
    if (image) {
      try {
        decodeRgb8(image);
      } catch (e) {
        error = e instanceof PayloadError ? e.message : String(e);
      }
    }
    tiles.push({
      seedIndex: seed,
      image,
      badges: state.satisfaction?.[seed] ?? [],
      phi: state.phi?.[seed] ?? null,
      error,
    });
  }
  return tiles;
}

export function historyModels(state: SessionState): HistoryModel[] {
  return state.history.map((entry, index) => ({ index, ...entry }));
}

export function describeRef(ref: RefDisplay): string {
  switch (ref.kind) {
    case "dataset":
      return `#${ref.id}`;
    case "upload":
      return "upload";
    case "previous_output":
      return `output[${ref.seed}]`;
  }
}

/** Thumbnail selection: first pick is the positive, second the negative. */
export interface Selection {
  pos: number | null;
  neg: number | null;
}

export function clickThumb(sel: Selection, id: number): Selection {
  if (sel.pos === id) return { pos: null, neg: sel.neg };
  if (sel.neg === id) return { pos: sel.pos, neg: null };
  if (sel.pos === null) return { pos: id, neg: sel.neg };
  if (sel.neg === null) return { pos: sel.pos, neg: id };
  return { pos: sel.pos, neg: id };
}

export function swapSelection(sel: Selection): Selection {
  return { pos: sel.neg, neg: sel.pos };
}
