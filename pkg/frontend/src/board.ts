/** The story board is a pure projection of the server transcript.
 *
 * `projectBoard` never looks at anything except a GET /v1/sessions/{id}
 * snapshot, so refetching and reprojecting always reproduces the same
 * board — there is no client-side story state to drift.
 */

import { detokenize, serializeCondition, tokenize } from "./codec.js";
import { ChaeRow, EmotionReadout, SessionSnapshot } from "./types.js";

export interface SentenceCard {
  index: number;
  sentence: string;
  chae: ChaeRow[];
  tokens: string[];
  tokenProbs: number[];
  pGenTrace: number[] | null;
  emotions: EmotionReadout[];
}

export interface BoardModel {
  sessionId: string;
  beginning: string;
  cards: SentenceCard[];
  context: string;
}

export function projectBoard(snapshot: SessionSnapshot): BoardModel {
  return {
    sessionId: snapshot.id,
    beginning: snapshot.beginning,
    cards: snapshot.history.map((entry, index) => ({
      index,
      sentence: entry.sentence,
      chae: entry.chae.map((row) => ({ ...row, actions: [...row.actions] })),
      tokens: [...entry.tokens],
      tokenProbs: [...entry.token_probs],
      pGenTrace: entry.p_gen_trace === null ? null : [...entry.p_gen_trace],
      emotions: entry.emotions.map((e) => ({ label: e.label, probs: [...e.probs] })),
    })),
    context: snapshot.context,
  };
}

export function boardsEqual(a: BoardModel, b: BoardModel): boolean {
  return JSON.stringify(a) === JSON.stringify(b);
}

// -- rendering (plain HTML strings; the DOM layer just assigns innerHTML) ----

const escapeHtml = (text: string): string =>
  text.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;").replace(/"/g, "&quot;");

/** Inline SVG polyline over [0,1] values, e.g. a p_gen trace. */
export function sparklineSvg(values: number[], width = 96, height = 24): string {
  if (values.length === 0) return "";
  const step = values.length === 1 ? 0 : width / (values.length - 1);
  const points = values
    .map((v, i) => {
      const x = values.length === 1 ? width / 2 : i * step;
      const y = height - Math.min(Math.max(v, 0), 1) * height;
      return `${x.toFixed(1)},${y.toFixed(1)}`;
    })
    .join(" ");
  return (
    `<svg class="sparkline" viewBox="0 0 ${width} ${height}" width="${width}" height="${height}">` +
    `<polyline fill="none" stroke="currentColor" stroke-width="1.5" points="${points}"/></svg>`
  );
}

function conditionChip(row: ChaeRow): string {
  if (!row.active) return `<span class="chip chip-inactive">inactive slot</span>`;
  const actions = row.actions.length === 0 ? "no action" : row.actions.join(" / ");
  return (
    `<span class="chip"><strong>${escapeHtml(row.char)}</strong>` +
    ` · ${escapeHtml(actions)} · <em>${escapeHtml(row.emotion)}</em></span>`
  );
}

function emotionBadges(readouts: EmotionReadout[]): string {
  return readouts
    .map((e) => {
      const confidence = Math.max(...e.probs);
      return `<span class="badge">${escapeHtml(e.label)} ${(confidence * 100).toFixed(0)}%</span>`;
    })
    .join(" ");
}

export function renderCard(card: SentenceCard): string {
  const preview = card.chae.flatMap(serializeCondition).join(" ");
  const spark = card.pGenTrace === null ? "" : sparklineSvg(card.pGenTrace);
  return `<article class="card" data-index="${card.index}">
  <header>#${card.index + 1} ${card.chae.map(conditionChip).join(" ")}</header>
  <p class="sentence">${escapeHtml(card.sentence)}</p>
  <div class="diagnostics">
    <span class="pgen" title="copy-gate trace">p_gen ${spark}</span>
    <span class="emotions">${emotionBadges(card.emotions)}</span>
  </div>
  <code class="chae-preview">${escapeHtml(preview)}</code>
  <button class="what-if" data-index="${card.index}">what if…</button>
</article>`;
}

export function renderBoard(model: BoardModel): string {
  const cards = model.cards.map(renderCard).join("\n");
  return `<section class="board">
  <p class="beginning">${escapeHtml(model.beginning)}</p>
  ${cards}
  <p class="context" hidden>${escapeHtml(model.context)}</p>
</section>`;
}

/** The story text the model sees next: beginning plus every accepted
 * sentence. The server guarantees this equals the snapshot's `context`;
 * the contract tests hold it to that. */
export function boardContextText(model: BoardModel): string {
  const tokens = tokenize(model.beginning);
  for (const card of model.cards) {
    const sentence =
      card.tokens.length > 0 && card.tokens[card.tokens.length - 1] === "</s>"
        ? card.tokens.slice(0, -1)
        : card.tokens;
    tokens.push(...sentence);
  }
  return detokenize(tokens);
}
