import { AddressInfo, Server, Socket, connect } from "node:net";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { MockBackend } from "../src/denoiser.js";
import { createGuidanceServer } from "../src/server.js";

let server: Server;
let port: number;

beforeAll(async () => {
  server = createGuidanceServer(new MockBackend());
  await new Promise<void>((resolve) =>
    server.listen(0, "127.0.0.1", resolve));
  port = (server.address() as AddressInfo).port;
});

afterAll(() => server.close());

/** Socket wrapper that buffers incoming lines from the moment the
 * connection exists, so unsolicited messages (busy rejections) are never
 * lost to listener-attachment races. */
class LineClient {
  private buf = "";
  private lines: string[] = [];
  private waiter: ((line: string) => void) | null = null;

  private constructor(readonly sock: Socket) {
    sock.on("data", (chunk) => {
      this.buf += chunk.toString("utf-8");
      let nl;
      while ((nl = this.buf.indexOf("\n")) >= 0) {
        const line = this.buf.slice(0, nl);
        this.buf = this.buf.slice(nl + 1);
        if (this.waiter) {
          const w = this.waiter;
          this.waiter = null;
          w(line);
        } else {
          this.lines.push(line);
        }
      }
    });
  }

  static open(): Promise<LineClient> {
    return new Promise((resolve, reject) => {
      const s = connect(port, "127.0.0.1");
      s.once("connect", () => resolve(new LineClient(s)));
      s.once("error", reject);
    });
  }

  next(): Promise<string> {
    const queued = this.lines.shift();
    if (queued !== undefined) return Promise.resolve(queued);
    return new Promise((resolve) => { this.waiter = resolve; });
  }

  ask(line: string): Promise<string> {
    this.sock.write(line.endsWith("\n") ? line : line + "\n");
    return this.next();
  }

  /** Graceful shutdown, resolved only after the FIN handshake completes,
   * then a short settle so the server has processed the close. */
  async close(): Promise<void> {
    await new Promise<void>((resolve) => {
      this.sock.once("close", () => resolve());
      this.sock.end();
    });
    await new Promise((r) => setTimeout(r, 20));
  }
}

const REQ = JSON.stringify({
  version: 1, prompt: "p", shape: [1, 2, 2],
  frames: [0, 0.5, 0.25, 1], tau: 111, seed: 3,
});

describe("guidance socket server", () => {
  it("answers a request with zero grads and echoed tau", async () => {
    const c = await LineClient.open();
    const reply = JSON.parse(await c.ask(REQ));
    expect(reply.backend).toBe("mock");
    expect(reply.shape).toEqual([1, 2, 2]);
    expect(reply.grads).toEqual([0, 0, 0, 0]);
    expect(reply.tau_used).toBe(111);
    await c.close();
  });

  it("serves several requests over one connection in order", async () => {
    const c = await LineClient.open();
    for (const tau of [50, 500, 950]) {
      const reply = JSON.parse(
        await c.ask(REQ.replace('"tau":111', `"tau":${tau}`)));
      expect(reply.tau_used).toBe(tau);
    }
    await c.close();
  });

  it("keeps the connection open after a bad request", async () => {
    const c = await LineClient.open();
    const err = JSON.parse(await c.ask('{"version":1}'));
    expect(err.error).toMatch(/missing field 'prompt'/);
    const again = JSON.parse(await c.ask(REQ));
    expect(again.tau_used).toBe(111);
    const malformed = JSON.parse(await c.ask("{oops"));
    expect(malformed.error).toMatch(/malformed/);
    await c.close();
  });

  it("rejects a second concurrent connection as busy", async () => {
    const first = await LineClient.open();
    const ok = JSON.parse(await first.ask(REQ));
    expect(ok.backend).toBe("mock");
    const second = await LineClient.open();
    const busy = JSON.parse(await second.next());
    expect(busy.error).toMatch(/busy/);
    await second.close();
    // the active client still works while the reject happens
    const alive = JSON.parse(await first.ask(REQ));
    expect(alive.tau_used).toBe(111);
    await first.close();
    // and after it leaves, new connections are served again
    const third = await LineClient.open();
    const reply = JSON.parse(await third.ask(REQ));
    expect(reply.backend).toBe("mock");
    await third.close();
  });

  it("skips blank lines between messages", async () => {
    const c = await LineClient.open();
    const reply = JSON.parse(await c.ask("\n\n" + REQ));
    expect(reply.tau_used).toBe(111);
    await c.close();
  });
});
