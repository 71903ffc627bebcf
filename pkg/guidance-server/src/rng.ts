/**
 * Deterministic RNG used for per-request noise so identical requests get
 * identical responses. splitmix64 for the stream, Box-Muller for normals.
 */

const MASK64 = (1n << 64n) - 1n;

export class Rng {
  private state: bigint;
  private spareNormal: number | null = null;

  constructor(seed: number | bigint) {
    this.state = BigInt(seed) & MASK64;
  }

  /** Next raw 64-bit state (splitmix64). */
  private next64(): bigint {
    this.state = (this.state + 0x9e3779b97f4a7c15n) & MASK64;
    let z = this.state;
    z = ((z ^ (z >> 30n)) * 0xbf58476d1ce4e5b9n) & MASK64;
    z = ((z ^ (z >> 27n)) * 0x94d049bb133111ebn) & MASK64;
    return z ^ (z >> 31n);
  }

  /** Uniform double in [0, 1) with 53 random bits. */
  uniform(): number {
    return Number(this.next64() >> 11n) / 9007199254740992;
  }

  /** Uniform integer in [lo, hi] inclusive. */
  int(lo: number, hi: number): number {
    return lo + Math.floor(this.uniform() * (hi - lo + 1));
  }

  /** Standard normal deviate. */
  normal(): number {
    if (this.spareNormal !== null) {
      const v = this.spareNormal;
      this.spareNormal = null;
      return v;
    }
    let u = 0;
    while (u === 0) u = this.uniform();
    const v = this.uniform();
    const r = Math.sqrt(-2 * Math.log(u));
    this.spareNormal = r * Math.sin(2 * Math.PI * v);
    return r * Math.cos(2 * Math.PI * v);
  }
}

/** FNV-1a 64-bit hash, for turning prompts into embedding seeds. */
export function fnv1a64(text: string): bigint {
  let h = 0xcbf29ce484222325n;
  const bytes = Buffer.from(text, "utf-8");
  for (const b of bytes) {
    h = ((h ^ BigInt(b)) * 0x100000001b3n) & MASK64;
  }
  return h;
}
