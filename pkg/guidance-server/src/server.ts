/**
 * TCP front end. One client at a time: while a connection is active, any
 * further connection is sent a busy error and closed. Within a connection,
 * requests are newline-delimited and answered strictly in order; a bad
 * request gets an error line and the connection stays open.
 */

import { createServer, Server, Socket } from "node:net";
import { Backend } from "./denoiser.js";
import { decodeRequest, encodeError, encodeResponse } from "./protocol.js";

export function createGuidanceServer(backend: Backend): Server {
  let active: Socket | null = null;

  return createServer((socket) => {
    if (active !== null && !active.destroyed) {
      socket.write(encodeError("busy: another client is connected"));
      socket.end();
      return;
    }
    active = socket;
    socket.on("close", () => {
      if (active === socket) active = null;
    });
    socket.on("error", () => { /* closed mid-write; nothing to do */ });

    let pending = "";
    socket.on("data", (chunk) => {
      pending += chunk.toString("utf-8");
      let nl;
      while ((nl = pending.indexOf("\n")) >= 0) {
        const line = pending.slice(0, nl);
        pending = pending.slice(nl + 1);
        if (line.trim() === "") continue;
        socket.write(handleLine(backend, line));
      }
    });
  });
}

function handleLine(backend: Backend, line: string): string {
  try {
    const req = decodeRequest(line);
    const { grads, tauUsed } = backend.handle(req);
    return encodeResponse(grads, req.shape, tauUsed, backend.name);
  } catch (e) {
    return encodeError((e as Error).message);
  }
}
