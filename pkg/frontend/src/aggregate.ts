/** Mean and t-based 95% confidence half-width over per-record scores.
 *
 * The t quantile comes from inverting the Student-t CDF (regularized
 * incomplete beta, continued fraction) by bisection; no stats dependency.
 * Accuracy is far below the 1e-6 the fixtures demand.
 */

export class AggregateError extends Error {}

// Lanczos g=7, n=9 coefficients for log-gamma
const LANCZOS = [
  0.99999999999980993, 676.5203681218851, -1259.1392167224028,
  771.32342877765313, -176.61502916214059, 12.507343278686905,
  -0.13857109526572012, 9.9843695780195716e-6, 1.5056327351493116e-7,
];

function logGamma(x: number): number {
  if (x < 0.5) {
    // reflection keeps the continued fraction arguments in range
    return Math.log(Math.PI / Math.sin(Math.PI * x)) - logGamma(1 - x);
  }
  x -= 1;
  let acc = LANCZOS[0]!;
  for (let i = 1; i < LANCZOS.length; i++) acc += LANCZOS[i]! / (x + i);
  const t = x + 7.5;
  return 0.5 * Math.log(2 * Math.PI) + (x + 0.5) * Math.log(t) - t + Math.log(acc);
}

/** Regularized incomplete beta I_x(a, b) via the Numerical-Recipes
 * continued fraction (modified Lentz). */
export function regularizedIncompleteBeta(x: number, a: number, b: number): number {
  if (x < 0 || x > 1) throw new AggregateError(`x=${x} outside [0, 1]`);
  if (x === 0 || x === 1) return x;
  if (x > (a + 1) / (a + b + 2)) {
    return 1 - regularizedIncompleteBeta(1 - x, b, a);
  }
  const front = Math.exp(
    a * Math.log(x) + b * Math.log(1 - x) -
    Math.log(a) - logGamma(a) - logGamma(b) + logGamma(a + b));
  const tiny = 1e-300;
  let c = 1;
  let d = 1 - ((a + b) * x) / (a + 1);
  if (Math.abs(d) < tiny) d = tiny;
  d = 1 / d;
  let h = d;
  for (let m = 1; m <= 300; m++) {
    const m2 = 2 * m;
    let num = (m * (b - m) * x) / ((a + m2 - 1) * (a + m2));
    d = 1 + num * d;
    if (Math.abs(d) < tiny) d = tiny;
    c = 1 + num / c;
    if (Math.abs(c) < tiny) c = tiny;
    d = 1 / d;
    h *= d * c;
    num = -((a + m) * (a + b + m) * x) / ((a + m2) * (a + m2 + 1));
    d = 1 + num * d;
    if (Math.abs(d) < tiny) d = tiny;
    c = 1 + num / c;
    if (Math.abs(c) < tiny) c = tiny;
    d = 1 / d;
    const delta = d * c;
    h *= delta;
    if (Math.abs(delta - 1) < 1e-15) break;
  }
  return front * h;
}

/** P(T <= t) for Student's t with df degrees of freedom. */
export function studentTCdf(t: number, df: number): number {
  if (df <= 0) throw new AggregateError(`degrees of freedom must be positive, got ${df}`);
  const tail = 0.5 * regularizedIncompleteBeta(df / (df + t * t), df / 2, 0.5);
  return t >= 0 ? 1 - tail : tail;
}

/** Two-sided 95% critical value: the 0.975 quantile of Student's t. */
export function tCritical95(df: number): number {
  if (df <= 0) throw new AggregateError(`degrees of freedom must be positive, got ${df}`);
  let lo = 0;
  let hi = 2;
  while (studentTCdf(hi, df) < 0.975) hi *= 2; // df=1 needs ~12.7
  for (let i = 0; i < 200; i++) {
    const mid = 0.5 * (lo + hi);
    if (studentTCdf(mid, df) < 0.975) lo = mid;
    else hi = mid;
    if (hi - lo < 1e-13 * Math.max(1, hi)) break;
  }
  return 0.5 * (lo + hi);
}

export interface CiResult {
  n: number;
  mean: number;
  halfWidth: number;
  /** Too few records for the interval to mean much; reported anyway. */
  lowN: boolean;
}

/** Mean +- t-based 95% CI half-width of a score sample (ddof = 1). */
export function aggregateCi(values: readonly number[]): CiResult {
  const n = values.length;
  if (n < 2) throw new AggregateError(`need at least 2 records, got ${n}`);
  const mean = values.reduce((s, v) => s + v, 0) / n;
  const ss = values.reduce((s, v) => s + (v - mean) * (v - mean), 0);
  const sd = Math.sqrt(ss / (n - 1));
  const halfWidth = tCritical95(n - 1) * sd / Math.sqrt(n);
  return { n, mean, halfWidth, lowN: n < 30 };
}
