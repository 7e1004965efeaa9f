/** Condition-form state and validation.
 *
 * A form edits one condition slot: character name, a dynamic list of
 * action phrases, one of the nine emotions, and an active toggle.
 * Inactive slots submit as padding regardless of their other fields.
 */

import { normalizeRow, tokenize } from "./codec.js";
import { ChaeRow, EmotionLabel, NEUTRAL } from "./types.js";

export interface ConditionForm {
  name: string;
  actions: string[];
  emotion: EmotionLabel;
  active: boolean;
}

export function emptyForm(): ConditionForm {
  return { name: "", actions: [], emotion: NEUTRAL, active: true };
}

export function setName(form: ConditionForm, name: string): ConditionForm {
  return { ...form, actions: [...form.actions], name };
}

export function setEmotion(form: ConditionForm, emotion: EmotionLabel): ConditionForm {
  return { ...form, actions: [...form.actions], emotion };
}

export function setActive(form: ConditionForm, active: boolean): ConditionForm {
  return { ...form, actions: [...form.actions], active };
}

export function addAction(form: ConditionForm, phrase: string): ConditionForm {
  return { ...form, actions: [...form.actions, phrase] };
}

export function removeAction(form: ConditionForm, index: number): ConditionForm {
  return { ...form, actions: form.actions.filter((_, i) => i !== index) };
}

/** Why this form cannot be submitted, or null when it can. */
export function formError(form: ConditionForm): string | null {
  if (!form.active) return null;
  if (tokenize(form.name).length === 0) return "character name is required";
  for (const action of form.actions) {
    if (tokenize(action).length === 0) return "action phrases cannot be empty";
  }
  return null;
}

/** Submit stays disabled until every slot has a name or is inactive. */
export function canSubmit(forms: ConditionForm[]): boolean {
  return forms.length > 0 && forms.every((form) => formError(form) === null);
}

/** The step-payload row this form stands for. */
export function toRow(form: ConditionForm): ChaeRow {
  if (!form.active) return normalizeRow({ active: false });
  return normalizeRow({
    char: form.name.trim(),
    actions: form.actions.map((a) => a.trim()),
    emotion: form.emotion,
    active: true,
  });
}

export function toRows(forms: ConditionForm[]): ChaeRow[] {
  return forms.map(toRow);
}

/** Rebuild forms from history rows (for editing a card in a what-if). */
export function fromRow(row: ChaeRow): ConditionForm {
  return row.active
    ? { name: row.char, actions: [...row.actions], emotion: row.emotion, active: true }
    : { ...emptyForm(), active: false };
}
