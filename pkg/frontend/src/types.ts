/** Wire types of the session service JSON API. */

export interface ImagePayload {
  width: number;
  height: number;
  rgb8_b64: string;
}

export type RefDisplay =
  | { kind: "dataset"; id: number }
  | { kind: "upload" }
  | { kind: "previous_output"; seed: number };

export interface HistoryEntry {
  pos: RefDisplay & { image: ImagePayload };
  neg: RefDisplay & { image: ImagePayload };
}

export interface SessionState {
  session_id: string;
  checkpoint_id: string;
  n_seeds: number;
  history: HistoryEntry[];
  outputs: ImagePayload[] | null;
  satisfaction: boolean[][] | null;
  phi: number[][] | null;
}

/** Outgoing constraint refs. */
export type WireRef =
  | { dataset: number }
  | { upload: ImagePayload }
  | { previous_output: number };

export interface CheckpointInfo {
  id: string;
  kind: string;
  iteration: number;
}

export interface DatasetItem {
  id: number;
  meta: Record<string, unknown>;
  image: ImagePayload;
}

export interface ImagePage {
  total: number;
  offset: number;
  items: DatasetItem[];
}
