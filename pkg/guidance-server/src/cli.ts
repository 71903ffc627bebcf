#!/usr/bin/env node
/**
 * guidance-server serve --port 9000 --model mock
 * guidance-server serve --port 9000 --model toy-v1 --w-tau sigma2
 *
 * Prints "listening on <port>" once the socket is bound (with --port 0 the
 * kernel-assigned port), so callers can scrape the address. A model that
 * fails to load prints an error banner and exits without listening.
 */

import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";
import yargs from "yargs";
import { hideBin } from "yargs/helpers";
import { Backend, MockBackend, ModelBackend, WTau,
         loadModel } from "./denoiser.js";
import { createGuidanceServer } from "./server.js";

const DEFAULT_MODELS_DIR = join(
  dirname(fileURLToPath(import.meta.url)), "..", "models");

function makeBackend(model: string, constant: number, wTau: WTau,
                     cfgScale: number, modelsDir: string): Backend {
  if (model === "mock") return new MockBackend(constant);
  const weights = loadModel(join(modelsDir, `${model}.json`));
  return new ModelBackend(weights, wTau, cfgScale);
}

export function main(argv: string[]): void {
  yargs(argv)
    .command(
      "serve",
      "serve pixel gradients over the newline-delimited socket protocol",
      (y) => y
        .option("port", { type: "number", default: 9000 })
        .option("host", { type: "string", default: "127.0.0.1" })
        .option("model", { type: "string", default: "mock",
                           describe: "model id, or 'mock'" })
        .option("constant", { type: "number", default: 0,
                              describe: "mock mode gradient value" })
        .option("w-tau", { type: "string", default: "const",
                           choices: ["const", "one", "sigma2"],
                           describe: "step weighting: const/one (w=1) "
                             + "or sigma2" })
        .option("cfg-scale", { type: "number", default: 1.0 })
        .option("models-dir", { type: "string",
                                default: DEFAULT_MODELS_DIR }),
      (args) => {
        let backend: Backend;
        try {
          const wTau: WTau = args.wTau === "sigma2" ? "sigma2" : "one";
          backend = makeBackend(args.model, args.constant, wTau,
                                args.cfgScale, args.modelsDir);
        } catch (e) {
          console.error(`error: ${(e as Error).message}`);
          console.error("refusing to serve without a loadable model");
          process.exit(1);
        }
        const server = createGuidanceServer(backend);
        server.listen(args.port, args.host, () => {
          const addr = server.address();
          const port = typeof addr === "object" && addr ? addr.port
                                                        : args.port;
          console.log(`listening on ${port}`);
        });
      })
    .demandCommand(1, "specify a command, e.g. serve")
    .strict()
    .help()
    .parseSync();
}

main(hideBin(process.argv));
