// Typed client for the tournament service HTTP contract.

export interface MatchupView {
  matchup_id: string;
  left_png_url: string;
  right_png_url: string;
  group: string;
  progress: number;
}

export interface GroupStatus {
  pool: number;
  total: number;
  done: number;
  complete: boolean;
  in_flight: boolean;
}

// "conflict": someone already decided this matchup (409).
// "unknown": the server no longer knows it, e.g. it restarted and dropped
// the dispatch (404). Both mean: stop retrying, fetch the next pair.
export type ChoiceResult = "ok" | "conflict" | "unknown";

export class ApiClient {
  constructor(private base: string = "") {}

  /** Next pending matchup for this rater, or null when none is available. */
  async next(rater: string): Promise<MatchupView | null> {
    const resp = await fetch(`${this.base}/api/next?rater=${encodeURIComponent(rater)}`);
    if (resp.status === 204) return null;
    if (!resp.ok) throw new Error(`next failed: HTTP ${resp.status}`);
    return (await resp.json()) as MatchupView;
  }

  async choose(matchupId: string, winner: "left" | "right", rater: string): Promise<ChoiceResult> {
    const resp = await fetch(`${this.base}/api/choice`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ matchup_id: matchupId, winner, rater }),
    });
    if (resp.status === 409) return "conflict";
    if (resp.status === 404) return "unknown";
    if (!resp.ok) throw new Error(`choice failed: HTTP ${resp.status}`);
    return "ok";
  }

  async status(): Promise<Record<string, GroupStatus>> {
    const resp = await fetch(`${this.base}/api/status`);
    if (!resp.ok) throw new Error(`status failed: HTTP ${resp.status}`);
    return (await resp.json()) as Record<string, GroupStatus>;
  }
}
