/** Session logic: which trial a rater sees next, what they are allowed
 * to know about it, and the aggregate report.
 *
 * Raters are blind to conditions. Trial ids and manifest paths both
 * embed the condition name, so rater-facing payloads carry only the
 * position in the rater's own shuffled order; audio is streamed through
 * position-keyed URLs and the server resolves them internally.
 */

import { aggregateCi, CiResult } from "./aggregate.js";
import { BundleTrial, StudyBundle } from "./bundle.js";
import { raterPermutation } from "./permutation.js";
import { RatingStore } from "./store.js";

export class SessionError extends Error {}

export interface TrialPayload {
  done: false;
  position: number; // 0-based index into this rater's order
  total: number;
  audio_url: string;
  context_url: string | null;
}

export interface DonePayload {
  done: true;
  rated: number;
  total: number;
}

export interface ConditionReport {
  n: number;
  ovl: CiResult | null;
  rel: CiResult | null;
}

const RATER_ID = /^[A-Za-z0-9._-]{1,64}$/;

export function checkRaterId(raterId: unknown): string {
  if (typeof raterId !== "string" || !RATER_ID.test(raterId)) {
    throw new SessionError("rater id must be 1-64 characters of [A-Za-z0-9._-]");
  }
  return raterId;
}

export class StudySession {
  private readonly orders = new Map<string, number[]>();

  constructor(readonly bundle: StudyBundle, readonly store: RatingStore) {}

  orderFor(raterId: string): number[] {
    let order = this.orders.get(raterId);
    if (!order) {
      order = raterPermutation(raterId, this.bundle.trials.length);
      this.orders.set(raterId, order);
    }
    return order;
  }

  trialAt(raterId: string, position: number): BundleTrial {
    const order = this.orderFor(raterId);
    if (!Number.isInteger(position) || position < 0 || position >= order.length) {
      throw new SessionError(`position ${position} outside 0..${order.length - 1}`);
    }
    return this.bundle.trials[order[position]!]!;
  }

  /** Resume point: ratings already logged decide where the session is. */
  nextFor(raterId: string): TrialPayload | DonePayload {
    const order = this.orderFor(raterId);
    let position = 0;
    while (position < order.length &&
           this.store.has(raterId, this.bundle.trials[order[position]!]!.trial_id)) {
      position++;
    }
    if (position >= order.length) {
      return { done: true, rated: order.length, total: order.length };
    }
    return this.payloadFor(raterId, position);
  }

  payloadFor(raterId: string, position: number): TrialPayload {
    const trial = this.trialAt(raterId, position);
    const base = `/api/audio/${encodeURIComponent(raterId)}/${position}`;
    return {
      done: false,
      position,
      total: this.bundle.trials.length,
      audio_url: `${base}/main`,
      context_url: trial.rel_context_wav === null ? null : `${base}/context`,
    };
  }

  /** Per-condition mean +- 95% CI for both scores; conditions with fewer
   * than 2 ratings report n only. */
  report(): Record<string, ConditionReport> {
    const byCondition = new Map<string, { ovl: number[]; rel: number[] }>();
    for (const condition of this.bundle.manifest.conditions) {
      byCondition.set(condition, { ovl: [], rel: [] });
    }
    for (const record of this.store.all()) {
      const trial = this.bundle.trialById.get(record.trial_id);
      if (!trial) continue; // log may predate a re-export; skip silently
      const scores = byCondition.get(trial.condition);
      if (!scores) continue;
      scores.ovl.push(record.ovl);
      scores.rel.push(record.rel);
    }
    const report: Record<string, ConditionReport> = {};
    for (const [condition, scores] of byCondition) {
      report[condition] = {
        n: scores.ovl.length,
        ovl: scores.ovl.length >= 2 ? aggregateCi(scores.ovl) : null,
        rel: scores.rel.length >= 2 ? aggregateCi(scores.rel) : null,
      };
    }
    return report;
  }
}
