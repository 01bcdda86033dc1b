#!/usr/bin/env node
/**
 * Command-line entry point for the bridge service.
 *
 *     texsync-bridge --listen 127.0.0.1:7631 [--model-id toy] [--device cpu] [--echo]
 *
 * Prints one "listening on host:port" line to stdout once the socket is
 * bound (with the resolved port when 0 was requested), so callers can wait
 * for readiness. Exit code 2 flags bad flags or a missing model; runtime
 * failures exit 1.
 */

import { parseArgs } from "node:util";
import { pathToFileURL } from "node:url";

import { BackboneError, loadBackbone } from "./backbone.js";
import { serve } from "./server.js";

const USAGE = `usage: texsync-bridge [--listen HOST:PORT] [--model-id ID] [--device DEV] [--echo]

  --listen HOST:PORT  address to bind (default 127.0.0.1:7631; port 0 picks a free port)
  --model-id ID       backbone weights to load (default "toy")
  --device DEV        compute device tag passed to the backbone (default "cpu")
  --echo              echo mode: return request latents verbatim, no model
  --help              show this message
`;

export async function main(argv: string[]): Promise<number> {
  let args;
  try {
    args = parseArgs({
      args: argv,
      options: {
        listen: { type: "string", default: "127.0.0.1:7631" },
        "model-id": { type: "string", default: "toy" },
        device: { type: "string", default: "cpu" },
        echo: { type: "boolean", default: false },
        help: { type: "boolean", default: false },
      },
    });
  } catch (err) {
    process.stderr.write(`${err instanceof Error ? err.message : err}\n${USAGE}`);
    return 2;
  }
  if (args.values.help) {
    process.stdout.write(USAGE);
    return 0;
  }

  try {
    // Echo mode answers from the request alone; don't demand model weights.
    const backbone = args.values.echo ? undefined : loadBackbone(args.values["model-id"]!, args.values.device!);
    const server = await serve(args.values.listen!, {
      backbone,
      echo: args.values.echo,
      log: (line) => process.stdout.write(`${line}\n`),
    });
    await new Promise<void>((resolve) => {
      const stop = () => server.close().finally(resolve);
      process.once("SIGINT", stop);
      process.once("SIGTERM", stop);
    });
    return 0;
  } catch (err) {
    process.stderr.write(`${err instanceof Error ? err.message : err}\n`);
    return err instanceof BackboneError || (err instanceof Error && /bad listen address/.test(err.message)) ? 2 : 1;
  }
}

const invokedDirectly = process.argv[1] !== undefined && import.meta.url === pathToFileURL(process.argv[1]).href;
if (invokedDirectly) {
  main(process.argv.slice(2)).then((code) => {
    process.exitCode = code;
  });
}
