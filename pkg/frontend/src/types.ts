/** Wire types for the chae story service (HTTP+JSON, /v1). */

export const EMOTIONS = [
  "joy",
  "trust",
  "fear",
  "surprise",
  "sadness",
  "disgust",
  "anger",
  "anticipation",
  "neutral",
] as const;

export type EmotionLabel = (typeof EMOTIONS)[number];

export const NEUTRAL: EmotionLabel = "neutral";

/** One per-character control condition as the service sends and receives it. */
export interface ChaeRow {
  char: string;
  actions: string[];
  emotion: EmotionLabel;
  active: boolean;
}

export interface DecodingSettings {
  strategy?: "greedy" | "beam" | "topk";
  beam_size?: number;
  top_k?: number;
  temperature?: number;
  max_sentence_len?: number;
  seed?: number;
}

export interface EmotionReadout {
  label: EmotionLabel;
  probs: number[];
}

/** One generated sentence with its diagnostics, as stored in the history. */
export interface HistoryEntry {
  chae: ChaeRow[];
  sentence: string;
  tokens: string[];
  ended: boolean;
  token_probs: number[];
  p_gen_trace: number[] | null;
  emotions: EmotionReadout[];
}

export interface StepResult extends HistoryEntry {
  index: number;
}

/** Full transcript from GET /v1/sessions/{id}; the board's single source of truth. */
export interface SessionSnapshot {
  id: string;
  beginning: string;
  config: Required<DecodingSettings>;
  sentences: string[];
  history: HistoryEntry[];
  context: string;
  story_spec: { beginning: string; chae: ChaeRow[][] };
  created: number;
  last_used: number;
}

export interface HealthReport {
  status: string;
  version: string;
  sessions: number;
  model?: Record<string, unknown>;
}

export interface EchoResult {
  tokens: string[];
  spec: ChaeRow[];
}
