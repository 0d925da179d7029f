/**
 * Wire protocol: length-prefixed binary messages, little-endian throughout.
 *
 * Layout per message:  [payload length: u32 LE] [type: u8] [payload]
 * The length counts the payload only. Frames are raw f32 pixels, H*W*3.
 */

export const PROTOCOL_VERSION = 1;

export const MsgType = {
  FrameIn: 0x01,
  FrameOut: 0x02,
  SetPrompt: 0x03,
  SetReference: 0x04,
  Stats: 0x05,
  Error: 0x06,
  Hello: 0x07,
} as const;
export type MsgTypeValue = (typeof MsgType)[keyof typeof MsgType];

export const ErrCode = {
  Size: 0x0001,
  Numeric: 0x0002,
  UnknownType: 0x0003,
  Invalid: 0x0004,
} as const;

export const Mode = { Tv2v: 1, Rv2v: 2 } as const;

export const MAX_PAYLOAD = 1 << 24;
const HEADER_BYTES = 5;

export interface Message {
  type: number;
  payload: Uint8Array;
}

export interface Hello {
  version: number;
  h: number;
  w: number;
  modes: number;
}

export interface Stats {
  frames: number;
  meanMs: number;
  p95Ms: number;
}

export class ProtocolError extends Error {}

export function encodeMessage(type: number, payload: Uint8Array = new Uint8Array(0)): Uint8Array {
  if (type < 1 || type > 0xff) throw new ProtocolError(`bad message type ${type}`);
  if (payload.length > MAX_PAYLOAD) {
    throw new ProtocolError(`payload ${payload.length} exceeds ${MAX_PAYLOAD}`);
  }
  const out = new Uint8Array(HEADER_BYTES + payload.length);
  const view = new DataView(out.buffer);
  view.setUint32(0, payload.length, true);
  view.setUint8(4, type);
  out.set(payload, HEADER_BYTES);
  return out;
}

/** Incremental frame splitter: feed arbitrary chunks, drain whole messages. */
export class MessageReader {
  private buf = new Uint8Array(0);

  feed(chunk: Uint8Array): void {
    const next = new Uint8Array(this.buf.length + chunk.length);
    next.set(this.buf);
    next.set(chunk, this.buf.length);
    this.buf = next;
  }

  next(): Message | null {
    if (this.buf.length < HEADER_BYTES) return null;
    const view = new DataView(this.buf.buffer, this.buf.byteOffset);
    const length = view.getUint32(0, true);
    if (length > MAX_PAYLOAD) throw new ProtocolError(`declared payload ${length} too large`);
    if (this.buf.length < HEADER_BYTES + length) return null;
    const type = view.getUint8(4);
    const payload = this.buf.slice(HEADER_BYTES, HEADER_BYTES + length);
    this.buf = this.buf.slice(HEADER_BYTES + length);
    return { type, payload };
  }

  drain(): Message[] {
    const out: Message[] = [];
    for (let m = this.next(); m !== null; m = this.next()) out.push(m);
    return out;
  }

  pending(): number {
    return this.buf.length;
  }
}

export function encodeFrame(pixels: Float32Array, h: number, w: number): Uint8Array {
  if (pixels.length !== h * w * 3) {
    throw new ProtocolError(`frame has ${pixels.length} floats, want ${h * w * 3}`);
  }
  // f32 values are serialized little-endian regardless of platform
  const out = new Uint8Array(pixels.length * 4);
  const view = new DataView(out.buffer);
  for (let i = 0; i < pixels.length; i++) view.setFloat32(i * 4, pixels[i], true);
  return out;
}

export function decodeFrame(payload: Uint8Array, h: number, w: number): Float32Array {
  const want = h * w * 3 * 4;
  if (payload.length !== want) {
    throw new ProtocolError(`frame payload ${payload.length} bytes, want ${want}`);
  }
  const view = new DataView(payload.buffer, payload.byteOffset, payload.length);
  const out = new Float32Array(h * w * 3);
  for (let i = 0; i < out.length; i++) out[i] = view.getFloat32(i * 4, true);
  return out;
}

export function decodeHello(payload: Uint8Array): Hello {
  if (payload.length !== 7) throw new ProtocolError(`hello payload ${payload.length} bytes, want 7`);
  const view = new DataView(payload.buffer, payload.byteOffset);
  return {
    version: view.getUint16(0, true),
    h: view.getUint16(2, true),
    w: view.getUint16(4, true),
    modes: view.getUint8(6),
  };
}

export function encodeSetPrompt(ids: number[]): Uint8Array {
  const out = new Uint8Array(2 + ids.length * 2);
  const view = new DataView(out.buffer);
  view.setUint16(0, ids.length, true);
  ids.forEach((id, i) => {
    if (id < 0 || id > 0xffff) throw new ProtocolError(`token id ${id} out of u16 range`);
    view.setUint16(2 + i * 2, id, true);
  });
  return out;
}

export function decodeStats(payload: Uint8Array): Stats {
  if (payload.length !== 12) throw new ProtocolError(`stats payload ${payload.length} bytes, want 12`);
  const view = new DataView(payload.buffer, payload.byteOffset);
  return {
    frames: view.getUint32(0, true),
    meanMs: view.getFloat32(4, true),
    p95Ms: view.getFloat32(8, true),
  };
}

export function decodeError(payload: Uint8Array): { code: number; text: string } {
  if (payload.length < 2) throw new ProtocolError("error payload shorter than its code");
  const view = new DataView(payload.buffer, payload.byteOffset);
  return {
    code: view.getUint16(0, true),
    text: new TextDecoder().decode(payload.slice(2)),
  };
}
