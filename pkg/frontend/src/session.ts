/** Story-session controller: one active request, server truth only.
 *
 * Every mutation (start, submit, what-if, undo) ends with a fresh
 * GET /v1/sessions/{id}; the board is always projected from that
 * snapshot, never patched optimistically. A single in-flight guard
 * makes rapid double-submits send one request.
 */

import { BoardModel, projectBoard } from "./board.js";
import { StudioClient } from "./client.js";
import { ChaeRow, DecodingSettings, SessionSnapshot, StepResult } from "./types.js";

export type SubmitOutcome =
  | { submitted: true; result: StepResult }
  | { submitted: false; reason: "busy" | "no-session" };

export class StorySession {
  private sessionId: string | null = null;
  private inFlight = false;
  snapshot: SessionSnapshot | null = null;

  constructor(private readonly client: StudioClient) {}

  get id(): string | null {
    return this.sessionId;
  }

  get busy(): boolean {
    return this.inFlight;
  }

  get board(): BoardModel | null {
    return this.snapshot === null ? null : projectBoard(this.snapshot);
  }

  private async exclusive<T>(work: () => Promise<T>): Promise<T> {
    if (this.inFlight) throw new Error("a request is already in flight");
    this.inFlight = true;
    try {
      return await work();
    } finally {
      this.inFlight = false;
    }
  }

  async start(beginning: string, config?: DecodingSettings): Promise<BoardModel> {
    return this.exclusive(async () => {
      this.sessionId = await this.client.createSession(beginning, config);
      this.snapshot = await this.client.getSession(this.sessionId);
      return projectBoard(this.snapshot);
    });
  }

  /** Step once; double-clicks while a request is pending submit nothing. */
  async submit(chae: ChaeRow[], overrides?: DecodingSettings): Promise<SubmitOutcome> {
    if (this.inFlight) return { submitted: false, reason: "busy" };
    if (this.sessionId === null) return { submitted: false, reason: "no-session" };
    const id = this.sessionId;
    return this.exclusive(async () => {
      const result = await this.client.step(id, chae, overrides);
      this.snapshot = await this.client.getSession(id);
      return { submitted: true, result } as const;
    });
  }

  /** Rewind so the edited card's slot is next, then step with the edits.
   *
   * Cards after `cardIndex` are discarded with it; the new branch starts
   * with the regenerated sentence at `cardIndex`.
   */
  async whatIf(
    cardIndex: number,
    chae: ChaeRow[],
    overrides?: DecodingSettings,
  ): Promise<StepResult> {
    const id = this.requireSession();
    return this.exclusive(async () => {
      let snapshot = await this.client.getSession(id);
      if (cardIndex < 0 || cardIndex >= snapshot.history.length) {
        throw new Error(`no sentence card at index ${cardIndex}`);
      }
      while (snapshot.history.length > cardIndex) {
        snapshot = await this.client.undo(id);
      }
      const result = await this.client.step(id, chae, overrides);
      this.snapshot = await this.client.getSession(id);
      return result;
    });
  }

  async undo(): Promise<BoardModel> {
    const id = this.requireSession();
    return this.exclusive(async () => {
      await this.client.undo(id);
      this.snapshot = await this.client.getSession(id);
      return projectBoard(this.snapshot);
    });
  }

  /** Forced refetch; the projected board must match what we already show. */
  async refresh(): Promise<BoardModel> {
    const id = this.requireSession();
    return this.exclusive(async () => {
      this.snapshot = await this.client.getSession(id);
      return projectBoard(this.snapshot);
    });
  }

  async close(): Promise<void> {
    if (this.sessionId === null) return;
    const id = this.sessionId;
    await this.exclusive(() => this.client.deleteSession(id));
    this.sessionId = null;
    this.snapshot = null;
  }

  private requireSession(): string {
    if (this.sessionId === null) throw new Error("no active session");
    return this.sessionId;
  }
}
