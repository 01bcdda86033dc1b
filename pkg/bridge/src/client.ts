/**
 * Minimal wire-protocol client.
 *
 * The texture engine is the production client; this one exists so the
 * adapter can be exercised end to end from this package (tests, smoke
 * checks) without the engine in the loop. One request in flight per
 * connection, matching the protocol's concurrency rule.
 */

import * as net from "node:net";

import {
  BridgeRequest,
  BridgeResponse,
  FrameDecoder,
  decodeResponse,
  encodeRequest,
  frame,
} from "./codec.js";
import { parseAddress } from "./server.js";

interface Waiter {
  resolve: (payload: Buffer) => void;
  reject: (err: Error) => void;
}

export class BridgeClient {
  private decoder = new FrameDecoder();
  private inbox: Buffer[] = [];
  private waiters: Waiter[] = [];
  private failure: Error | null = null;

  private constructor(private socket: net.Socket) {
    socket.on("data", (chunk) => {
      let payloads: Buffer[];
      try {
        payloads = this.decoder.push(chunk);
      } catch (err) {
        this.fail(err instanceof Error ? err : new Error(String(err)));
        return;
      }
      for (const p of payloads) {
        const w = this.waiters.shift();
        if (w) {
          w.resolve(p);
        } else {
          this.inbox.push(p);
        }
      }
    });
    socket.on("error", (err) => this.fail(err));
    socket.on("close", () => this.fail(new Error("connection closed")));
  }

  private fail(err: Error): void {
    this.failure ??= err;
    for (const w of this.waiters.splice(0)) {
      w.reject(this.failure);
    }
  }

  static connect(address: string, timeoutMs = 10_000): Promise<BridgeClient> {
    const { host, port } = parseAddress(address);
    return new Promise((resolve, reject) => {
      const socket = net.createConnection({ host, port, timeout: timeoutMs });
      socket.once("connect", () => {
        socket.setTimeout(0);
        resolve(new BridgeClient(socket));
      });
      socket.once("error", reject);
      socket.once("timeout", () => {
        socket.destroy();
        reject(new Error(`cannot reach backbone at ${address}`));
      });
    });
  }

  /** Send raw payload bytes; resolve with the next response payload. */
  exchangeRaw(payload: Buffer): Promise<Buffer> {
    if (this.failure) {
      return Promise.reject(this.failure);
    }
    this.socket.write(frame(payload));
    const next = this.inbox.shift();
    if (next !== undefined) {
      return Promise.resolve(next);
    }
    return new Promise((resolve, reject) => {
      this.waiters.push({ resolve, reject });
    });
  }

  async call(req: BridgeRequest): Promise<BridgeResponse> {
    return decodeResponse(await this.exchangeRaw(encodeRequest(req)));
  }

  close(): void {
    this.socket.removeAllListeners("close");
    this.socket.destroy();
  }
}
