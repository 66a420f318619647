import type {
  CandidateInfo,
  CaseInfo,
  Decision,
  Evaluation,
  ExportedMark,
  SessionState,
  SlicePayload,
} from "./types.js";

export type FetchLike = (
  url: string,
  init?: { method?: string; headers?: Record<string, string>; body?: string },
) => Promise<{ ok: boolean; status: number; json(): Promise<unknown> }>;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
  }
}

/**
 * Typed client for the review server. All server mutation goes through
 * postDecisions / createSession; every other method is a GET.
 */
export class ReviewApi {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike = fetch as unknown as FetchLike,
  ) {}

  private async request<T>(path: string, init?: Parameters<FetchLike>[1]): Promise<T> {
    const res = await this.fetchFn(this.baseUrl + path, init);
    const body = (await res.json()) as T & { detail?: string };
    if (!res.ok) {
      throw new ApiError(res.status, body.detail ?? `HTTP ${res.status}`);
    }
    return body;
  }

  private post<T>(path: string, body: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  listCases(): Promise<CaseInfo[]> {
    return this.request("/cases");
  }

  getSlice(
    caseId: string,
    k: number,
    modality: "flair" | "t1",
    windowLevel?: { window: number; level: number },
  ): Promise<SlicePayload> {
    let q = `modality=${modality}`;
    if (windowLevel) {
      q += `&wl=${windowLevel.window},${windowLevel.level}`;
    }
    return this.request(`/cases/${encodeURIComponent(caseId)}/slices/${k}?${q}`);
  }

  getCandidates(caseId: string, threshold: number): Promise<CandidateInfo[]> {
    return this.request(
      `/cases/${encodeURIComponent(caseId)}/candidates?threshold=${threshold}`,
    );
  }

  createSession(threshold: number, cases?: string[]): Promise<SessionState> {
    return this.post("/sessions", cases ? { threshold, cases } : { threshold });
  }

  getSession(sid: string): Promise<SessionState> {
    return this.request(`/sessions/${encodeURIComponent(sid)}`);
  }

  postDecisions(
    sid: string,
    decisions: Decision[],
  ): Promise<{ seqs: number[]; session: SessionState }> {
    return this.post(`/sessions/${encodeURIComponent(sid)}/decisions`, { decisions });
  }

  getExport(sid: string): Promise<{ source_id: string; marks: ExportedMark[] }> {
    return this.request(`/sessions/${encodeURIComponent(sid)}/export`);
  }

  getEvaluation(sid: string): Promise<Evaluation> {
    return this.request(`/sessions/${encodeURIComponent(sid)}/evaluation`);
  }
}
