/**
 * Transport: a thin byte-pipe interface over WebSocket so the session
 * logic stays testable with a fake and runs under node with the ws
 * package standing in for the browser socket.
 */

export interface Transport {
  send(data: Uint8Array): void;
  close(): void;
  onData: ((chunk: Uint8Array) => void) | null;
  onClose: ((reason: string) => void) | null;
}

interface WebSocketLike {
  binaryType: string;
  send(data: ArrayBufferLike | Uint8Array): void;
  close(): void;
  onopen: ((ev: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onerror: ((ev: unknown) => void) | null;
  onclose: ((ev: unknown) => void) | null;
}

export type WebSocketCtor = new (url: string) => WebSocketLike;

export function connectWebSocket(url: string, Ctor?: WebSocketCtor): Promise<Transport> {
  const W = Ctor ?? (globalThis as { WebSocket?: WebSocketCtor }).WebSocket;
  if (!W) throw new Error("no WebSocket implementation available");
  return new Promise((resolve, reject) => {
    const sock = new W(url);
    sock.binaryType = "arraybuffer";
    let settled = false;
    // bytes can land between open and the session attaching its handler
    // (node's ws parses buffered data in the same tick as open), so hold
    // them until a consumer exists
    let dataSink: ((chunk: Uint8Array) => void) | null = null;
    let closeSink: ((reason: string) => void) | null = null;
    const backlog: Uint8Array[] = [];
    let pendingClose: string | null = null;
    const transport: Transport = {
      send: (data) => sock.send(data),
      close: () => sock.close(),
      get onData() {
        return dataSink;
      },
      set onData(fn) {
        dataSink = fn;
        if (fn) while (backlog.length) fn(backlog.shift()!);
      },
      get onClose() {
        return closeSink;
      },
      set onClose(fn) {
        closeSink = fn;
        if (fn && pendingClose !== null) {
          const reason = pendingClose;
          pendingClose = null;
          fn(reason);
        }
      },
    };
    const deliver = (chunk: Uint8Array) => {
      if (dataSink) dataSink(chunk);
      else backlog.push(chunk);
    };
    sock.onopen = () => {
      settled = true;
      resolve(transport);
    };
    sock.onmessage = (ev) => {
      const data = ev.data;
      if (data instanceof ArrayBuffer) deliver(new Uint8Array(data));
      else if (ArrayBuffer.isView(data)) {
        const v = data as ArrayBufferView;
        deliver(new Uint8Array(v.buffer, v.byteOffset, v.byteLength));
      }
    };
    sock.onerror = () => {
      if (!settled) {
        settled = true;
        reject(new Error(`connection to ${url} failed`));
      }
    };
    sock.onclose = () => {
      if (!settled) {
        settled = true;
        reject(new Error(`connection to ${url} closed during handshake`));
        return;
      }
      if (closeSink) closeSink("socket closed");
      else pendingClose = "socket closed";
    };
  });
}
