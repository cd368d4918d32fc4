import type { EstimateEvent } from "./types.js";

export class ApiError extends Error {
  constructor(readonly status: number, readonly detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

async function detailOf(response: Response): Promise<string> {
  try {
    const body = (await response.json()) as { detail?: string };
    return body.detail ?? response.statusText;
  } catch {
    return response.statusText;
  }
}

export interface SubmitRequest {
  plan: unknown;
  data?: string;
  id?: string;
  pacing_ms?: number;
}

export class QueryApi {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (...args) => fetch(...args),
  ) {}

  async submit(request: SubmitRequest): Promise<string> {
    const response = await this.fetchImpl(`${this.baseUrl}/queries`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(request),
    });
    if (response.status !== 201) {
      throw new ApiError(response.status, await detailOf(response));
    }
    const body = (await response.json()) as { id: string };
    return body.id;
  }

  async stop(queryId: string): Promise<EstimateEvent> {
    const response = await this.fetchImpl(`${this.baseUrl}/queries/${queryId}/stop`, {
      method: "POST",
    });
    if (!response.ok) {
      throw new ApiError(response.status, await detailOf(response));
    }
    return (await response.json()) as EstimateEvent;
  }

  async status(queryId: string): Promise<unknown> {
    const response = await this.fetchImpl(`${this.baseUrl}/queries/${queryId}`);
    if (!response.ok) {
      throw new ApiError(response.status, await detailOf(response));
    }
    return response.json();
  }

  streamUrl(queryId: string, periodMs: number): string {
    const ws = this.baseUrl.replace(/^http/, "ws");
    return `${ws}/queries/${queryId}/stream?period=${Math.round(periodMs)}`;
  }
}

/** Client-side form validation; returns an error message or null. */
export function validateConfidence(raw: string): string | null {
  const value = Number(raw);
  if (!Number.isFinite(value) || value <= 0 || value >= 1) {
    return "confidence must be a number strictly between 0 and 1";
  }
  return null;
}

export function validatePlanJson(raw: string): string | null {
  try {
    const doc = JSON.parse(raw) as Record<string, unknown>;
    if (typeof doc !== "object" || doc === null || !("f" in doc)) {
      return "plan must be a JSON object with an aggregate expression 'f'";
    }
    return null;
  } catch (error) {
    return `plan is not valid JSON: ${(error as Error).message}`;
  }
}
