/** DOM wiring for the studio page. All state lives in StorySession and
 * the form models; this file only reads inputs and assigns innerHTML. */

import { boardsEqual, projectBoard, renderBoard } from "./board.js";
import { ApiError, StudioClient } from "./client.js";
import { serializeChae } from "./codec.js";
import {
  ConditionForm,
  addAction,
  canSubmit,
  emptyForm,
  formError,
  fromRow,
  removeAction,
  setActive,
  setEmotion,
  setName,
  toRows,
} from "./forms.js";
import { StorySession } from "./session.js";
import { EMOTIONS, EmotionLabel } from "./types.js";

const baseUrl = (window as { CHAE_BASE_URL?: string }).CHAE_BASE_URL ?? "http://127.0.0.1:8000";
const client = new StudioClient(baseUrl);
const session = new StorySession(client);

let k = 2;
let forms: ConditionForm[] = [];
let whatIfIndex: number | null = null;

const el = <T extends HTMLElement>(id: string): T => {
  const node = document.getElementById(id);
  if (node === null) throw new Error(`missing element #${id}`);
  return node as T;
};

const banner = () => el<HTMLDivElement>("banner");
const boardHost = () => el<HTMLDivElement>("board");
const editorHost = () => el<HTMLDivElement>("editor");

function showBanner(message: string, retry: () => void): void {
  banner().hidden = false;
  banner().innerHTML = `<span></span> <button id="retry">retry</button>`;
  banner().querySelector("span")!.textContent = message;
  banner().querySelector("button")!.addEventListener("click", retry);
}

function hideBanner(): void {
  banner().hidden = true;
  banner().innerHTML = "";
}

function resetForms(): void {
  forms = Array.from({ length: k }, emptyForm);
  whatIfIndex = null;
}

function renderEditor(): void {
  const blocks = forms
    .map((form, i) => {
      const error = formError(form);
      const actions = form.actions
        .map(
          (phrase, j) =>
            `<li>${phrase} <button data-form="${i}" data-remove="${j}">×</button></li>`,
        )
        .join("");
      const options = EMOTIONS.map(
        (label) =>
          `<option value="${label}"${label === form.emotion ? " selected" : ""}>${label}</option>`,
      ).join("");
      return `<fieldset data-form="${i}" ${form.active ? "" : "class='inactive'"}>
  <legend>condition ${i + 1}</legend>
  <label>character <input data-form="${i}" class="name" value="${form.name}"
    ${form.active ? "" : "disabled"}></label>
  <label>emotion <select data-form="${i}" class="emotion" ${form.active ? "" : "disabled"}>
    ${options}</select></label>
  <label><input type="checkbox" data-form="${i}" class="active" ${form.active ? "checked" : ""}>
    active</label>
  <ul class="actions">${actions}</ul>
  <input data-form="${i}" class="new-action" placeholder="add action phrase"
    ${form.active ? "" : "disabled"}>
  ${error === null ? "" : `<p class="field-error">${error}</p>`}
</fieldset>`;
    })
    .join("\n");
  const preview = canSubmit(forms) ? serializeChae(toRows(forms)).join(" ") : "";
  const label = whatIfIndex === null ? "generate sentence" : `regenerate card ${whatIfIndex + 1}`;
  editorHost().innerHTML = `${blocks}
<code id="preview">${preview}</code>
<button id="submit" ${canSubmit(forms) && !session.busy ? "" : "disabled"}>${label}</button>`;
  wireEditor();
}

function wireEditor(): void {
  editorHost()
    .querySelectorAll<HTMLInputElement>("input.name")
    .forEach((input) =>
      input.addEventListener("input", () => {
        forms[Number(input.dataset.form)] = setName(forms[Number(input.dataset.form)], input.value);
        renderEditor();
      }),
    );
  editorHost()
    .querySelectorAll<HTMLSelectElement>("select.emotion")
    .forEach((select) =>
      select.addEventListener("change", () => {
        forms[Number(select.dataset.form)] = setEmotion(
          forms[Number(select.dataset.form)],
          select.value as EmotionLabel,
        );
        renderEditor();
      }),
    );
  editorHost()
    .querySelectorAll<HTMLInputElement>("input.active")
    .forEach((box) =>
      box.addEventListener("change", () => {
        forms[Number(box.dataset.form)] = setActive(forms[Number(box.dataset.form)], box.checked);
        renderEditor();
      }),
    );
  editorHost()
    .querySelectorAll<HTMLInputElement>("input.new-action")
    .forEach((input) =>
      input.addEventListener("keydown", (event) => {
        if (event.key === "Enter" && input.value.trim() !== "") {
          forms[Number(input.dataset.form)] = addAction(
            forms[Number(input.dataset.form)],
            input.value.trim(),
          );
          renderEditor();
        }
      }),
    );
  editorHost()
    .querySelectorAll<HTMLButtonElement>("button[data-remove]")
    .forEach((button) =>
      button.addEventListener("click", () => {
        forms[Number(button.dataset.form)] = removeAction(
          forms[Number(button.dataset.form)],
          Number(button.dataset.remove),
        );
        renderEditor();
      }),
    );
  el<HTMLButtonElement>("submit").addEventListener("click", () => void submit());
}

function renderSession(): void {
  const board = session.board;
  boardHost().innerHTML = board === null ? "" : renderBoard(board);
  boardHost()
    .querySelectorAll<HTMLButtonElement>("button.what-if")
    .forEach((button) =>
      button.addEventListener("click", () => {
        const index = Number(button.dataset.index);
        whatIfIndex = index;
        forms = session.board!.cards[index].chae.map(fromRow);
        renderEditor();
      }),
    );
  renderEditor();
}

async function submit(): Promise<void> {
  if (!canSubmit(forms)) return;
  try {
    if (whatIfIndex === null) {
      const outcome = await session.submit(toRows(forms));
      if (!outcome.submitted) return; // in-flight guard: drop the duplicate click
    } else {
      await session.whatIf(whatIfIndex, toRows(forms));
    }
    resetForms();
    // sanity: a forced refetch must render the identical board
    const shown = session.board!;
    const refetched = projectBoard(await client.getSession(session.id!));
    if (!boardsEqual(shown, refetched)) {
      showBanner("board drifted from the server transcript", () => void session.refresh());
    }
    renderSession();
  } catch (error) {
    surface(error);
  }
}

function surface(error: unknown): void {
  if (error instanceof ApiError) {
    showBanner(`${error.code}: ${error.message}`, () => void boot());
  } else {
    showBanner(String(error), () => void boot());
  }
}

async function boot(): Promise<void> {
  try {
    const health = await client.health();
    hideBanner();
    k = typeof health.model?.k === "number" ? (health.model.k as number) : 2;
    resetForms();
    renderEditor();
  } catch (error) {
    surface(error);
    return;
  }

  el<HTMLButtonElement>("start").addEventListener("click", () => {
    void (async () => {
      const beginning = el<HTMLInputElement>("beginning").value;
      if (beginning.trim() === "") {
        el<HTMLParagraphElement>("beginning-error").textContent =
          "the beginning cannot be empty";
        return; // inline validation: no request sent
      }
      el<HTMLParagraphElement>("beginning-error").textContent = "";
      try {
        await session.start(beginning);
        resetForms();
        renderSession();
      } catch (error) {
        surface(error);
      }
    })();
  });
}

void boot();
