/** Deterministic per-rater trial ordering.
 *
 * FNV-1a of the rater id seeds a splitmix64 stream driving a Fisher-Yates
 * shuffle. Everything is 64-bit integer arithmetic (BigInt here), so the
 * order matches the Python harness bit for bit; both suites pin the same
 * cross-language test vector.
 */

const MASK64 = (1n << 64n) - 1n;
const FNV_OFFSET = 0xcbf29ce484222325n;
const FNV_PRIME = 0x100000001b3n;

export function fnv1a64(text: string): bigint {
  let value = FNV_OFFSET;
  for (const byte of new TextEncoder().encode(text)) {
    value = ((value ^ BigInt(byte)) * FNV_PRIME) & MASK64;
  }
  return value;
}

export function* splitmix64(seed: bigint): Generator<bigint, never, void> {
  let state = seed & MASK64;
  for (;;) {
    state = (state + 0x9e3779b97f4a7c15n) & MASK64;
    let z = state;
    z = ((z ^ (z >> 30n)) * 0xbf58476d1ce4e5b9n) & MASK64;
    z = ((z ^ (z >> 27n)) * 0x94d049bb133111ebn) & MASK64;
    yield z ^ (z >> 31n);
  }
}

export function raterPermutation(raterId: string, n: number): number[] {
  if (!Number.isInteger(n) || n < 0) {
    throw new RangeError(`permutation size must be a non-negative integer, got ${n}`);
  }
  const order = Array.from({ length: n }, (_, i) => i);
  const stream = splitmix64(fnv1a64(raterId));
  for (let i = n - 1; i > 0; i--) {
    const j = Number(stream.next().value % BigInt(i + 1));
    [order[i], order[j]] = [order[j]!, order[i]!];
  }
  return order;
}
