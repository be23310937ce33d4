/**
 * WebSocket connection with validation on both directions and
 * exponential-backoff reconnect. The render loop never touches the
 * socket; incoming messages are handed to a listener that mutates the
 * view state.
 */

import type { ClientMessage, ServerMessage } from "./protocol.js";
import { parseServerMessage, validateClientMessage } from "./protocol.js";

export interface FeedClientEvents {
  onMessage(msg: ServerMessage): void;
  onOpen(): void;
  onClose(willRetry: boolean, attempt: number): void;
}

export class FeedClient {
  private ws: WebSocket | null = null;
  private attempt = 0;
  private closed = false;
  private timer: ReturnType<typeof setTimeout> | null = null;

  constructor(
    readonly url: string,
    readonly events: FeedClientEvents,
    readonly maxBackoffMs = 10_000,
  ) {
    this.connect();
  }

  private connect(): void {
    if (this.closed) return;
    const ws = new WebSocket(this.url);
    this.ws = ws;
    ws.onopen = () => {
      this.attempt = 0;
      this.events.onOpen();
    };
    ws.onmessage = (ev) => {
      if (typeof ev.data !== "string") return;
      const msg = parseServerMessage(ev.data);
      if (msg !== null) this.events.onMessage(msg);
    };
    ws.onclose = () => {
      this.ws = null;
      if (this.closed) {
        this.events.onClose(false, this.attempt);
        return;
      }
      this.attempt += 1;
      this.events.onClose(true, this.attempt);
      const backoff = Math.min(this.maxBackoffMs, 250 * 2 ** Math.min(this.attempt, 6));
      this.timer = setTimeout(() => this.connect(), backoff);
    };
    ws.onerror = () => {
      // onclose fires afterwards and owns the retry
    };
  }

  /** Validates against the schema; refuses (and reports) anything off it. */
  send(msg: ClientMessage): string | null {
    const problem = validateClientMessage(msg);
    if (problem !== null) return problem;
    if (this.ws === null || this.ws.readyState !== WebSocket.OPEN) {
      return "not connected";
    }
    this.ws.send(JSON.stringify(msg));
    return null;
  }

  close(): void {
    this.closed = true;
    if (this.timer !== null) clearTimeout(this.timer);
    this.ws?.close();
  }
}
