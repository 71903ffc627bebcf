/**
 * Wire protocol: newline-delimited UTF-8 JSON, one message per line.
 *
 * Request:  {version:1, prompt, shape:[k,H,W], frames:[...], tau:int|null,
 *            seed:int}
 * Response: {version:1, shape:[k,H,W], grads:[...], tau_used:int,
 *            backend:string}
 * Error:    {version:1, error:string}
 *
 * Floats are serialized with 9 significant digits in printf "%g" style so
 * both ends of the wire produce byte-identical encodings for the same
 * values. JavaScript's own formatting rounds ties away from zero and uses
 * different exponent thresholds, so the formatter below works on the exact
 * decimal expansion of the double instead.
 */

export const PROTOCOL_VERSION = 1;

export class ProtocolError extends Error {}

const SIG_DIGITS = 9;

/** Exact (digits, exponent) decimal decomposition of a finite double.
 * Returns the significant digits of |x| as a string D and the power e
 * such that |x| = 0.D1D2... * 10^(e+1), i.e. first digit has weight 10^e.
 * Every double is a dyadic rational, so the expansion is finite and BigInt
 * arithmetic gives it exactly. */
function exactDecimal(x: number): { digits: string; e10: number } {
  const buf = new DataView(new ArrayBuffer(8));
  buf.setFloat64(0, Math.abs(x));
  const hi = buf.getUint32(0);
  const lo = buf.getUint32(4);
  const expBits = (hi >>> 20) & 0x7ff;
  const mantissa = (BigInt(hi & 0xfffff) << 32n) | BigInt(lo);
  // significand * 2^k, subnormals have no implicit leading bit
  const sig = expBits === 0 ? mantissa : mantissa | (1n << 52n);
  const k = (expBits === 0 ? -1074 : expBits - 1075);
  let digits: string;
  let e10: number;
  if (k >= 0) {
    digits = (sig << BigInt(k)).toString();
    e10 = digits.length - 1;
  } else {
    // sig * 2^k = sig * 5^-k / 10^-k
    digits = (sig * 5n ** BigInt(-k)).toString();
    e10 = digits.length - 1 + k;
  }
  return { digits, e10 };
}

/** Round a digit string to n significant digits, ties to even.
 * Returns the rounded digits (length <= n) and the exponent carry. */
function roundDigits(digits: string, n: number): { digits: string;
                                                   carry: number } {
  if (digits.length <= n) return { digits, carry: 0 };
  const head = digits.slice(0, n);
  const tail = digits.slice(n);
  const first = tail.charCodeAt(0) - 48;
  let up: boolean;
  if (first > 5) up = true;
  else if (first < 5) up = false;
  else if (/[1-9]/.test(tail.slice(1))) up = true;
  else up = (head.charCodeAt(n - 1) - 48) % 2 === 1; // exact tie
  if (!up) return { digits: head, carry: 0 };
  const bumped = (BigInt(head) + 1n).toString();
  if (bumped.length > n) return { digits: bumped.slice(0, n), carry: 1 };
  return { digits: bumped, carry: 0 };
}

function stripTrailingZeros(s: string): string {
  return s.replace(/0+$/, "");
}

/** printf "%.9g" for doubles, matching the C/Python output byte for byte:
 * 9 significant digits, trailing zeros stripped, scientific notation when
 * the decimal exponent is < -4 or >= 9, exponents signed and >= 2 digits. */
export function g9(x: number): string {
  if (Number.isNaN(x)) return "nan";
  if (x === Infinity) return "inf";
  if (x === -Infinity) return "-inf";
  if (x === 0) return Object.is(x, -0) ? "-0" : "0";
  const sign = x < 0 ? "-" : "";
  const exact = exactDecimal(x);
  const r = roundDigits(exact.digits, SIG_DIGITS);
  let digits = stripTrailingZeros(r.digits);
  if (digits === "") digits = "0";
  const e10 = exact.e10 + r.carry;
  if (e10 < -4 || e10 >= SIG_DIGITS) {
    const mant = digits.length > 1
      ? `${digits[0]}.${digits.slice(1)}`
      : digits;
    const esign = e10 < 0 ? "-" : "+";
    const eabs = String(Math.abs(e10)).padStart(2, "0");
    return `${sign}${mant}e${esign}${eabs}`;
  }
  if (e10 >= digits.length - 1) {
    return sign + digits + "0".repeat(e10 - digits.length + 1);
  }
  if (e10 >= 0) {
    return `${sign}${digits.slice(0, e10 + 1)}.${digits.slice(e10 + 1)}`;
  }
  return `${sign}0.${"0".repeat(-e10 - 1)}${digits}`;
}

export function formatArray(values: Float64Array | number[]): string {
  const parts = new Array<string>(values.length);
  for (let i = 0; i < values.length; i++) parts[i] = g9(values[i]!);
  return parts.join(",");
}

export interface GuidanceRequest {
  prompt: string;
  shape: [number, number, number];
  frames: Float64Array; // row-major k*H*W
  tau: number | null;
  seed: number;
}

function requireField(obj: Record<string, unknown>, field: string): unknown {
  if (!(field in obj)) {
    throw new ProtocolError(`message missing field '${field}'`);
  }
  return obj[field];
}

export function decodeRequest(line: string): GuidanceRequest {
  let obj: unknown;
  try {
    obj = JSON.parse(line);
  } catch (e) {
    throw new ProtocolError(`malformed message: ${(e as Error).message}`);
  }
  if (typeof obj !== "object" || obj === null || Array.isArray(obj)) {
    throw new ProtocolError("message is not an object");
  }
  const o = obj as Record<string, unknown>;
  const version = requireField(o, "version");
  if (version !== PROTOCOL_VERSION) {
    throw new ProtocolError(`unsupported protocol version ${version}`);
  }
  const prompt = requireField(o, "prompt");
  if (typeof prompt !== "string") {
    throw new ProtocolError(`prompt must be a string, got ${typeof prompt}`);
  }
  const shape = requireField(o, "shape");
  if (!Array.isArray(shape) || shape.length !== 3
      || !shape.every((s) => Number.isInteger(s) && s > 0)) {
    throw new ProtocolError(`bad shape ${JSON.stringify(shape)}`);
  }
  const [k, h, w] = shape as [number, number, number];
  const frames = requireField(o, "frames");
  const expected = k * h * w;
  if (!Array.isArray(frames) || frames.length !== expected
      || !frames.every((v) => typeof v === "number")) {
    const n = Array.isArray(frames) ? frames.length : "non-array";
    throw new ProtocolError(
      `frames has ${n} values, shape [${k},${h},${w}] needs ${expected}`);
  }
  const tau = requireField(o, "tau");
  if (tau !== null && !Number.isInteger(tau)) {
    throw new ProtocolError(`tau must be an integer or null, got ${tau}`);
  }
  const seed = requireField(o, "seed");
  if (!Number.isInteger(seed)) {
    throw new ProtocolError(`seed must be an integer, got ${seed}`);
  }
  return {
    prompt,
    shape: [k, h, w],
    frames: Float64Array.from(frames as number[]),
    tau: tau as number | null,
    seed: seed as number,
  };
}

export function encodeResponse(grads: Float64Array,
                               shape: [number, number, number],
                               tauUsed: number, backend: string): string {
  const [k, h, w] = shape;
  return `{"version":${PROTOCOL_VERSION},"shape":[${k},${h},${w}],`
    + `"grads":[${formatArray(grads)}],"tau_used":${tauUsed},`
    + `"backend":${JSON.stringify(backend)}}\n`;
}

export function encodeError(message: string): string {
  return `{"version":${PROTOCOL_VERSION},"error":`
    + `${JSON.stringify(message)}}\n`;
}
