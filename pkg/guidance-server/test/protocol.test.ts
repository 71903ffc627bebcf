import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";
import { ProtocolError, decodeRequest, encodeError, encodeResponse,
         formatArray, g9 } from "../src/protocol.js";

const HERE = dirname(fileURLToPath(import.meta.url));

function hexToDouble(hex: string): number {
  const buf = Buffer.from(hex, "hex");
  return new DataView(buf.buffer, buf.byteOffset, 8).getFloat64(0);
}

describe("g9 float formatting", () => {
  it("matches the reference %.9g byte for byte on the golden table", () => {
    const golden: { hex: string; g9: string }[] = JSON.parse(
      readFileSync(join(HERE, "g9_golden.json"), "utf-8"));
    expect(golden.length).toBeGreaterThan(100);
    for (const { hex, g9: want } of golden) {
      expect(g9(hexToDouble(hex)), `0x${hex}`).toBe(want);
    }
  });

  it("rounds ties to even like the C library", () => {
    // 2^-13 has a 10-digit expansion ending in 5: exact tie at digit 9
    expect(g9(2 ** -13)).toBe("0.000122070312");
    expect(g9(123456784.5)).toBe("123456784");
    expect(g9(123456785.5)).toBe("123456786");
  });

  it("switches notation at the %g thresholds", () => {
    expect(g9(0.0001)).toBe("0.0001");
    expect(g9(0.00009)).toBe("9e-05");
    expect(g9(999999999)).toBe("999999999");
    expect(g9(1000000000)).toBe("1e+09");
    expect(g9(999999999.5)).toBe("1e+09"); // carry promotes the exponent
  });

  it("handles zeros, signs, and non-finite values", () => {
    expect(g9(0)).toBe("0");
    expect(g9(-0)).toBe("-0");
    expect(g9(-1 / 3)).toBe("-0.333333333");
    expect(g9(Infinity)).toBe("inf");
    expect(g9(-Infinity)).toBe("-inf");
    expect(g9(NaN)).toBe("nan");
  });

  it("is idempotent through parse -> format", () => {
    for (const s of ["0.25", "0.333333333", "1e-09", "1.23456789e+20",
                     "123456789", "0.0001"]) {
      expect(g9(Number(s))).toBe(s);
    }
  });
});

describe("request decoding", () => {
  const good = JSON.stringify({
    version: 1, prompt: "a leaf", shape: [1, 2, 2],
    frames: [0, 0.25, 0.5, 1], tau: 300, seed: 7,
  });

  it("accepts a valid request", () => {
    const req = decodeRequest(good);
    expect(req.prompt).toBe("a leaf");
    expect(req.shape).toEqual([1, 2, 2]);
    expect(Array.from(req.frames)).toEqual([0, 0.25, 0.5, 1]);
    expect(req.tau).toBe(300);
    expect(req.seed).toBe(7);
  });

  it("accepts null tau (delegate sampling)", () => {
    const req = decodeRequest(good.replace('"tau":300', '"tau":null'));
    expect(req.tau).toBeNull();
  });

  it("names the missing field", () => {
    const obj = JSON.parse(good);
    delete obj.tau;
    expect(() => decodeRequest(JSON.stringify(obj)))
      .toThrow(/missing field 'tau'/);
  });

  it("rejects wrong version, bad shape, frame count mismatch", () => {
    expect(() => decodeRequest(good.replace('"version":1', '"version":2')))
      .toThrow(/version/);
    expect(() => decodeRequest(good.replace("[1,2,2]", "[1,2]")))
      .toThrow(/shape/);
    expect(() => decodeRequest(good.replace("[0,0.25,0.5,1]", "[0,0.25]")))
      .toThrow(/needs 4/);
  });

  it("rejects non-integer tau and seed", () => {
    expect(() => decodeRequest(good.replace('"tau":300', '"tau":3.5')))
      .toThrow(ProtocolError);
    expect(() => decodeRequest(good.replace('"seed":7', '"seed":"x"')))
      .toThrow(/seed/);
  });

  it("rejects malformed JSON with context", () => {
    expect(() => decodeRequest("{nope")).toThrow(/malformed/);
    expect(() => decodeRequest("[1,2]")).toThrow(/not an object/);
  });
});

describe("response encoding", () => {
  it("emits one newline-terminated line with 9-digit floats", () => {
    const line = encodeResponse(Float64Array.from([0, 1 / 3]), [1, 1, 2],
                                500, "mock");
    expect(line).toBe('{"version":1,"shape":[1,1,2],'
      + '"grads":[0,0.333333333],"tau_used":500,"backend":"mock"}\n');
  });

  it("escapes error messages as JSON strings", () => {
    expect(encodeError('bad "x"'))
      .toBe('{"version":1,"error":"bad \\"x\\""}\n');
  });

  it("formats arrays compactly", () => {
    expect(formatArray([1e-9, 2.5, -0.0001234]))
      .toBe("1e-09,2.5,-0.0001234");
  });
});
