import * as net from "net";
import { serveStream } from "./server";
import { ServedModel, TinyLinearModel } from "./tinymodel";

function usage(): never {
  process.stderr.write(
    "usage: modelserver --tiny-test-model [--tcp HOST:PORT]\n" +
      "  Serves the wire protocol on stdio, or on a TCP endpoint with --tcp.\n"
  );
  process.exit(2);
}

function parseArgs(argv: string[]): { model: ServedModel; tcp: { host: string; port: number } | null } {
  let model: ServedModel | null = null;
  let tcp: { host: string; port: number } | null = null;
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i];
    if (arg === "--tiny-test-model") {
      model = new TinyLinearModel();
    } else if (arg === "--tcp") {
      const endpoint = argv[++i];
      if (!endpoint) usage();
      const colon = endpoint.lastIndexOf(":");
      const port = Number(endpoint.slice(colon + 1));
      if (colon <= 0 || !Number.isInteger(port) || port < 0 || port > 65535) usage();
      tcp = { host: endpoint.slice(0, colon), port };
    } else {
      usage();
    }
  }
  if (!model) usage();
  return { model, tcp };
}

function main(): void {
  const { model, tcp } = parseArgs(process.argv.slice(2));
  if (tcp) {
    const server = net.createServer((socket) => {
      socket.on("error", () => socket.destroy());
      serveStream(model, socket, socket).then(() => socket.end());
    });
    server.listen(tcp.port, tcp.host, () => {
      const addr = server.address() as net.AddressInfo;
      process.stderr.write(`serving ${model.name} on ${addr.address}:${addr.port}\n`);
    });
  } else {
    serveStream(model, process.stdin, process.stdout).then(() => process.exit(0));
  }
}

main();
