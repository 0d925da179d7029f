/**
 * Operator console wiring. All session logic lives in session.ts; this
 * file only moves values between the DOM and the session object.
 */

import { drawFrame, fromRgba } from "./render.js";
import { MAX_IN_FLIGHT, StreamSession } from "./session.js";
import { FramePump, syntheticFrame } from "./synthetic.js";
import { RV2V_INSTRUCTION_ID, STYLE_TOKENS } from "./vocab.js";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
};

let session: StreamSession | null = null;
let pump: FramePump | null = null;
let pendingReference: Float32Array | null = null;

function setBanner(text: string | null): void {
  const el = $("banner");
  el.textContent = text ?? "";
  el.style.display = text ? "block" : "none";
}

function refreshCounters(): void {
  if (!session) return;
  $("counters").textContent =
    `sent ${session.framesSent} · shown ${session.framesReceived} · ` +
    `in flight ${session.inFlight}/${MAX_IN_FLIGHT}`;
  $("state").textContent = session.state;
  $("state").className = `state ${session.state}`;
}

function refreshSwitchLog(): void {
  if (!session) return;
  $("switchlog").textContent = session.switches
    .map((s) => `frame ${s.effectFrame}: ${s.kind} → ${s.label}`)
    .join("\n");
}

async function connect(): Promise<void> {
  const url = ($("url") as HTMLInputElement).value;
  setBanner(null);
  try {
    session = await StreamSession.connect(url, {
      onFrame: (pixels, index) => {
        const h = session!.hello!.h;
        const w = session!.hello!.w;
        drawFrame($("output") as HTMLCanvasElement, pixels, h, w);
        $("outindex").textContent = `output frame ${index}`;
        refreshCounters();
      },
      onState: (_state, banner) => {
        setBanner(banner);
        refreshCounters();
      },
      onStats: (stats) => {
        $("latency").textContent =
          `server: ${stats.frames} frames, mean ${stats.meanMs.toFixed(1)} ms, ` +
          `p95 ${stats.p95Ms.toFixed(1)} ms`;
      },
      onServerError: (code, text) => setBanner(`server error ${code}: ${text}`),
    });
  } catch (err) {
    setBanner((err as Error).message);
    return;
  }
  const hello = session.hello!;
  $("dims").textContent = `negotiated ${hello.w}×${hello.h}, modes 0b${hello.modes.toString(2)}`;
  const statsTimer = setInterval(() => {
    if (!session || session.state !== "connected") {
      clearInterval(statsTimer);
      return;
    }
    session.requestStats();
  }, 1000);
  startPump();
}

function startPump(): void {
  if (!session) return;
  pump?.stop();
  const fps = Number(($("fps") as HTMLInputElement).value) || 8;
  pump = new FramePump(session, {
    fps,
    frameSource: (t, h, w) => {
      const frame = syntheticFrame(t, h, w);
      drawFrame($("source") as HTMLCanvasElement, frame, h, w);
      refreshCounters();
      return frame;
    },
  });
  pump.start();
}

function wireControls(): void {
  const picker = $("prompt") as HTMLSelectElement;
  for (const tok of STYLE_TOKENS) {
    const opt = document.createElement("option");
    opt.value = tok.name;
    opt.textContent = tok.name;
    picker.appendChild(opt);
  }

  $("connect").onclick = () => void connect();

  $("pause").onclick = () => {
    if (!pump) return;
    pump.paused = !pump.paused;
    $("pause").textContent = pump.paused ? "resume" : "pause";
  };

  $("setprompt").onclick = () => {
    if (!session) return;
    const tok = STYLE_TOKENS.find((t) => t.name === picker.value);
    if (!tok) return setBanner(`unknown token ${picker.value}`);
    session.switchPrompt([tok.id], tok.name);
    $("mode").textContent = `mode tv2v · prompt "${tok.name}"`;
    refreshSwitchLog();
  };

  $("reffile").onchange = () => {
    const input = $("reffile") as HTMLInputElement;
    const file = input.files?.[0];
    if (!file || !session?.hello) return;
    const img = new Image();
    img.onload = () => {
      const { h, w } = session!.hello!;
      const scratch = document.createElement("canvas");
      scratch.width = w;
      scratch.height = h;
      const ctx = scratch.getContext("2d")!;
      ctx.drawImage(img, 0, 0, w, h);
      // thumbnail first, send only on the button press
      ($("refthumb") as HTMLCanvasElement).getContext("2d")!.drawImage(scratch, 0, 0, 64, 64);
      pendingReference = fromRgba(ctx.getImageData(0, 0, w, h).data, h, w);
      URL.revokeObjectURL(img.src);
    };
    img.src = URL.createObjectURL(file);
  };

  $("setref").onclick = () => {
    if (!session || !pendingReference) return setBanner("load a reference image first");
    session.switchReference(pendingReference, "uploaded image");
    $("mode").textContent = `mode rv2v (instruction token ${RV2V_INSTRUCTION_ID})`;
    refreshSwitchLog();
  };
}

wireControls();
