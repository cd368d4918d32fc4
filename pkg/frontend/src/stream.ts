import type { EstimateEvent } from "./types.js";
import { isTerminal } from "./types.js";

export interface StreamHandlers {
  onEvent(event: EstimateEvent): void;
  /** the connection dropped mid-query and will be retried; mark the gap */
  onGap(): void;
  onError(message: string): void;
  onClosed(): void;
}

export interface SocketLike {
  onopen: (() => void) | null;
  onmessage: ((event: { data: unknown }) => void) | null;
  onclose: (() => void) | null;
  onerror: (() => void) | null;
  close(): void;
}

export type SocketFactory = (url: string) => SocketLike;

const defaultFactory: SocketFactory = (url) =>
  new (globalThis as { WebSocket: new (url: string) => SocketLike }).WebSocket(url);

/** WebSocket estimate stream with reconnect-and-backoff.
 *
 * Reconnects after abnormal closes while the query is still live, doubling
 * the delay up to a cap; a terminal event or an explicit error frame ends
 * the stream for good.
 */
export class EstimateStream {
  private socket: SocketLike | null = null;
  private closedForGood = false;
  private sawTerminal = false;
  private everConnected = false;
  private backoffMs: number;
  private reconnectTimer: ReturnType<typeof setTimeout> | null = null;

  constructor(
    private readonly url: string,
    private readonly handlers: StreamHandlers,
    private readonly options: {
      initialBackoffMs?: number;
      maxBackoffMs?: number;
      factory?: SocketFactory;
    } = {},
  ) {
    this.backoffMs = options.initialBackoffMs ?? 250;
  }

  start(): void {
    this.connect(false);
  }

  stop(): void {
    this.closedForGood = true;
    if (this.reconnectTimer !== null) {
      clearTimeout(this.reconnectTimer);
      this.reconnectTimer = null;
    }
    this.socket?.close();
  }

  private connect(isReconnect: boolean): void {
    if (this.closedForGood) {
      return;
    }
    const factory = this.options.factory ?? defaultFactory;
    let socket: SocketLike;
    try {
      socket = factory(this.url);
    } catch (error) {
      this.handlers.onError(`cannot open stream: ${(error as Error).message}`);
      this.handlers.onClosed();
      return;
    }
    this.socket = socket;
    socket.onopen = () => {
      this.everConnected = true;
      this.backoffMs = this.options.initialBackoffMs ?? 250;
      if (isReconnect) {
        this.handlers.onGap();
      }
    };
    socket.onmessage = (message) => {
      let parsed: unknown;
      try {
        parsed = JSON.parse(String(message.data));
      } catch {
        this.handlers.onError("malformed frame from server");
        return;
      }
      const frame = parsed as { error?: string } & EstimateEvent;
      if (frame.error !== undefined) {
        this.closedForGood = true;
        this.handlers.onError(frame.error);
        return;
      }
      if (isTerminal(frame.status)) {
        this.sawTerminal = true;
      }
      this.handlers.onEvent(frame);
    };
    socket.onerror = () => {
      if (!this.everConnected && !this.closedForGood) {
        this.handlers.onError("connection failed");
      }
    };
    socket.onclose = () => {
      if (this.closedForGood || this.sawTerminal) {
        this.handlers.onClosed();
        return;
      }
      if (!this.everConnected) {
        // Never managed to connect: surface it rather than retry forever.
        this.handlers.onError("server unreachable");
        this.handlers.onClosed();
        return;
      }
      const delay = this.backoffMs;
      this.backoffMs = Math.min(delay * 2, this.options.maxBackoffMs ?? 5000);
      this.reconnectTimer = setTimeout(() => this.connect(true), delay);
    };
  }
}
