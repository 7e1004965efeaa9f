/** Typed client for the story service's HTTP+JSON API.
 *
 * All generation happens server-side; this file only moves JSON. The
 * fetch implementation is injectable so tests can run against fakes and
 * node environments.
 */

import {
  ChaeRow,
  DecodingSettings,
  EchoResult,
  HealthReport,
  SessionSnapshot,
  StepResult,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

/** A structured error body from the service: {code, message, position?}. */
export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
    readonly position?: number,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

export class StudioClient {
  private readonly fetchImpl: FetchLike;

  constructor(
    readonly baseUrl: string,
    fetchImpl?: FetchLike,
  ) {
    this.fetchImpl = fetchImpl ?? ((url, init) => fetch(url, init));
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    let response: Response;
    try {
      response = await this.fetchImpl(`${this.baseUrl}${path}`, {
        method,
        headers: body === undefined ? undefined : { "content-type": "application/json" },
        body: body === undefined ? undefined : JSON.stringify(body),
      });
    } catch (cause) {
      throw new ApiError(0, "unreachable", `service unreachable at ${this.baseUrl}`);
    }
    if (!response.ok) {
      let code = "http_error";
      let message = `${response.status} ${response.statusText}`;
      let position: number | undefined;
      try {
        const payload = (await response.json()) as {
          code?: string;
          message?: string;
          position?: number;
        };
        if (payload.code) code = payload.code;
        if (payload.message) message = payload.message;
        position = payload.position ?? undefined;
      } catch {
        // non-JSON error body; keep the status line
      }
      throw new ApiError(response.status, code, message, position);
    }
    if (response.status === 204) return undefined as T;
    return (await response.json()) as T;
  }

  health(): Promise<HealthReport> {
    return this.request("GET", "/v1/health");
  }

  async createSession(beginning: string, config?: DecodingSettings): Promise<string> {
    const body: Record<string, unknown> = { beginning };
    if (config !== undefined) body.config = config;
    const { id } = await this.request<{ id: string }>("POST", "/v1/sessions", body);
    return id;
  }

  getSession(id: string): Promise<SessionSnapshot> {
    return this.request("GET", `/v1/sessions/${id}`);
  }

  deleteSession(id: string): Promise<void> {
    return this.request("DELETE", `/v1/sessions/${id}`);
  }

  step(id: string, chae: ChaeRow[], overrides?: DecodingSettings): Promise<StepResult> {
    const body: Record<string, unknown> = { chae };
    if (overrides !== undefined) body.overrides = overrides;
    return this.request("POST", `/v1/sessions/${id}/step`, body);
  }

  undo(id: string): Promise<SessionSnapshot> {
    return this.request("POST", `/v1/sessions/${id}/undo`);
  }

  /** Server-side serialization of a condition block, for previews and contract checks. */
  echoChae(chae: ChaeRow[]): Promise<EchoResult> {
    return this.request("POST", "/v1/echo/chae", { chae });
  }
}
