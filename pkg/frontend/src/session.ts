/**
 * Live session state machine: one transport, one mutable state, all
 * mutation driven by the event queue (socket data, user actions).
 *
 * Invariants kept here:
 *  - at most MAX_IN_FLIGHT unacknowledged frames on the wire,
 *  - every output frame index maps to a previously sent input index,
 *  - the recorded switch marks name the input frame a switch applies from
 *    (the next frame sent after the switch message).
 */

import {
  decodeError,
  decodeFrame,
  decodeHello,
  decodeStats,
  encodeFrame,
  encodeMessage,
  encodeSetPrompt,
  Hello,
  MessageReader,
  MsgType,
  PROTOCOL_VERSION,
  ProtocolError,
  Stats,
} from "./protocol.js";
import { connectWebSocket, Transport, WebSocketCtor } from "./transport.js";

export type SessionState = "connecting" | "connected" | "disconnected" | "failed";

export interface SwitchMark {
  kind: "prompt" | "reference";
  label: string;
  /** 1-based input frame index the new condition first applies to. */
  effectFrame: number;
}

export interface SessionEvents {
  onFrame?: (pixels: Float32Array, index: number) => void;
  onState?: (state: SessionState, banner: string | null) => void;
  onStats?: (stats: Stats) => void;
  onServerError?: (code: number, text: string) => void;
}

export const MAX_IN_FLIGHT = 4;

export class StreamSession {
  state: SessionState = "connecting";
  banner: string | null = null;
  hello: Hello | null = null;
  framesSent = 0;
  framesReceived = 0;
  inFlight = 0;
  switches: SwitchMark[] = [];

  private reader = new MessageReader();
  private events: SessionEvents;
  private helloResolve: ((h: Hello) => void) | null = null;
  private helloReject: ((err: Error) => void) | null = null;

  private constructor(private transport: Transport, events: SessionEvents) {
    this.events = events;
    transport.onData = (chunk) => this.onData(chunk);
    transport.onClose = () => this.onTransportClosed();
  }

  /** Open a transport and complete the server-first hello handshake. */
  static async connect(
    url: string,
    events: SessionEvents = {},
    Ctor?: WebSocketCtor,
  ): Promise<StreamSession> {
    const transport = await connectWebSocket(url, Ctor);
    // the hello may already be in the transport backlog and get handled
    // inside the constructor, so go through awaitHello
    const session = new StreamSession(transport, events);
    await session.awaitHello();
    return session;
  }

  /** Wrap an already-open transport; the hello is awaited separately. */
  static overTransport(transport: Transport, events: SessionEvents = {}): StreamSession {
    return new StreamSession(transport, events);
  }

  awaitHello(): Promise<Hello> {
    if (this.hello) return Promise.resolve(this.hello);
    if (this.state === "failed" || this.state === "disconnected") {
      return Promise.reject(new Error(this.banner ?? `session is ${this.state}`));
    }
    return new Promise((resolve, reject) => {
      this.helloResolve = resolve;
      this.helloReject = reject;
    });
  }

  canSend(): boolean {
    return this.state === "connected" && this.inFlight < MAX_IN_FLIGHT;
  }

  /**
   * Send one source frame. Returns false (and sends nothing) when the
   * in-flight cap is reached or the session is not connected.
   */
  sendFrame(pixels: Float32Array): boolean {
    if (!this.canSend() || !this.hello) return false;
    const payload = encodeFrame(pixels, this.hello.h, this.hello.w);
    this.transport.send(encodeMessage(MsgType.FrameIn, payload));
    this.framesSent += 1;
    this.inFlight += 1;
    return true;
  }

  switchPrompt(ids: number[], label: string): void {
    this.requireConnected();
    this.transport.send(encodeMessage(MsgType.SetPrompt, encodeSetPrompt(ids)));
    this.mark("prompt", label);
  }

  switchReference(pixels: Float32Array, label: string): void {
    this.requireConnected();
    if (!this.hello) throw new Error("no negotiated dimensions yet");
    const payload = encodeFrame(pixels, this.hello.h, this.hello.w);
    this.transport.send(encodeMessage(MsgType.SetReference, payload));
    this.mark("reference", label);
  }

  requestStats(): void {
    this.requireConnected();
    this.transport.send(encodeMessage(MsgType.Stats));
  }

  close(): void {
    this.transport.close();
    this.setState("disconnected", null);
  }

  private mark(kind: SwitchMark["kind"], label: string): void {
    // a switch is handled strictly after every frame already sent, so it
    // first affects the next frame
    this.switches.push({ kind, label, effectFrame: this.framesSent + 1 });
  }

  private requireConnected(): void {
    if (this.state !== "connected") throw new Error(`session is ${this.state}`);
  }

  private onData(chunk: Uint8Array): void {
    this.reader.feed(chunk);
    let messages;
    try {
      messages = this.reader.drain();
    } catch (err) {
      this.fail(`protocol violation: ${(err as Error).message}`);
      return;
    }
    for (const msg of messages) this.onMessage(msg.type, msg.payload);
  }

  private onMessage(type: number, payload: Uint8Array): void {
    try {
      switch (type) {
        case MsgType.Hello: {
          const hello = decodeHello(payload);
          if (hello.version !== PROTOCOL_VERSION) {
            this.fail(`server speaks protocol v${hello.version}, this console needs v${PROTOCOL_VERSION}`);
            this.helloReject?.(new Error(this.banner ?? "version mismatch"));
            return;
          }
          this.hello = hello;
          this.setState("connected", null);
          this.helloResolve?.(hello);
          break;
        }
        case MsgType.FrameOut: {
          if (!this.hello) throw new ProtocolError("frame before hello");
          const pixels = decodeFrame(payload, this.hello.h, this.hello.w);
          this.framesReceived += 1;
          this.inFlight = Math.max(0, this.inFlight - 1);
          if (this.framesReceived > this.framesSent) {
            this.fail(`phantom output frame ${this.framesReceived} (only ${this.framesSent} sent)`);
            return;
          }
          this.events.onFrame?.(pixels, this.framesReceived);
          break;
        }
        case MsgType.Stats:
          this.events.onStats?.(decodeStats(payload));
          break;
        case MsgType.Error: {
          const { code, text } = decodeError(payload);
          this.events.onServerError?.(code, text);
          break;
        }
        default:
          throw new ProtocolError(`unexpected server message type ${type}`);
      }
    } catch (err) {
      this.fail((err as Error).message);
    }
  }

  private onTransportClosed(): void {
    if (this.state === "failed") return;
    // counters freeze as-is; no silent reconnect
    this.setState("disconnected", this.state === "connecting" ? "connection closed during handshake" : null);
    this.helloReject?.(new Error("closed before hello"));
  }

  private fail(banner: string): void {
    this.setState("failed", banner);
    this.transport.close();
  }

  private setState(state: SessionState, banner: string | null): void {
    this.state = state;
    this.banner = banner;
    this.events.onState?.(state, banner);
  }
}
