/** Client-side mirror of the server's condition serialization.
 *
 * The server is the source of truth; this mirror exists so the UI can show
 * the exact marker-token stream a submitted condition block will become.
 * The e2e contract tests assert token-for-token agreement with the
 * service's POST /v1/echo/chae for every shape the forms can produce.
 */

import { ChaeRow, EMOTIONS, EmotionLabel, NEUTRAL } from "./types.js";

export const COND_START = "<SEP>";
export const NAME_START = "<soc>";
export const ACTIONS_START = "<soa>";
export const EMOTION_START = "<soe>";
export const ACTION_SEP = "<sep>";
export const NO_ACTION = "<no_action>";

export const PAD_NAME = "none";

export const PAD_ROW: ChaeRow = Object.freeze({
  char: PAD_NAME,
  actions: [],
  emotion: NEUTRAL,
  active: false,
});

// Word runs (letters/digits/underscore, apostrophe-joined) or single
// punctuation marks, over the lowercased text.
const TOKEN_RE = /[\p{L}\p{N}_]+(?:'[\p{L}\p{N}_]+)*|[^\p{L}\p{N}_\s]/gu;
const PUNCT_RE = /^[^\p{L}\p{N}_\s]$/u;

export function tokenize(text: string): string[] {
  return text.toLowerCase().match(TOKEN_RE) ?? [];
}

/** Space-join tokens, attaching punctuation to the preceding word. */
export function detokenize(tokens: string[]): string {
  const parts: string[] = [];
  for (const tok of tokens) {
    if (parts.length > 0 && PUNCT_RE.test(tok)) {
      parts[parts.length - 1] += tok;
    } else {
      parts.push(tok);
    }
  }
  return parts.join(" ");
}

export function isEmotion(value: string): value is EmotionLabel {
  return (EMOTIONS as readonly string[]).includes(value);
}

/** Fill optional fields; an inactive row is always the padding triple. */
export function normalizeRow(row: Partial<ChaeRow>): ChaeRow {
  if (row.active === false) {
    return { ...PAD_ROW };
  }
  return {
    char: row.char ?? "",
    actions: [...(row.actions ?? [])],
    emotion: row.emotion ?? NEUTRAL,
    active: true,
  };
}

/** Append padding rows up to the model's slot count `k`. */
export function padRows(rows: ChaeRow[], k: number): ChaeRow[] {
  if (rows.length > k) {
    throw new Error(`${rows.length} conditions but the model takes ${k}; refusing to truncate`);
  }
  const padded = rows.map((row) => ({ ...row, actions: [...row.actions] }));
  while (padded.length < k) {
    padded.push({ ...PAD_ROW });
  }
  return padded;
}

/** Flatten one condition into its marker-token form. */
export function serializeCondition(row: ChaeRow): string[] {
  const out = [COND_START, NAME_START, ...tokenize(row.char), ACTIONS_START];
  if (row.actions.length === 0) {
    out.push(NO_ACTION);
  } else {
    row.actions.forEach((action, i) => {
      if (i > 0) out.push(ACTION_SEP);
      out.push(...tokenize(action));
    });
  }
  out.push(EMOTION_START, row.emotion);
  return out;
}

/** Concatenate the serialized form of every condition, padding included. */
export function serializeChae(rows: ChaeRow[]): string[] {
  return rows.flatMap(serializeCondition);
}

export function rowsEqual(a: ChaeRow[], b: ChaeRow[]): boolean {
  return (
    a.length === b.length &&
    a.every(
      (row, i) =>
        row.char === b[i].char &&
        row.emotion === b[i].emotion &&
        row.active === b[i].active &&
        row.actions.length === b[i].actions.length &&
        row.actions.every((action, j) => action === b[i].actions[j]),
    )
  );
}
