/** Browser entry point: connect, steer, draw frames, show telemetry. */

import { OrbitCamera } from "./camera.js";
import { bindResetButton, bindToggle } from "./controls.js";
import {
  decodeFrame,
  parseServerMessage,
  poseMessage,
  resizeMessage,
  rgbToRgba,
} from "./protocol.js";
import { RollingStats } from "./stats.js";

const TICK_HZ = 30;
const RETRY_MS = 1500;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

function get2d(canvas: HTMLCanvasElement): CanvasRenderingContext2D {
  const ctx = canvas.getContext("2d");
  if (!ctx) {
    throw new Error("2d canvas unavailable");
  }
  return ctx;
}

function main(): void {
  const canvas = el<HTMLCanvasElement>("view");
  const ctx = get2d(canvas);
  const banner = el<HTMLDivElement>("banner");
  const statsBox = el<HTMLDivElement>("stats");
  const guidanceBox = el<HTMLInputElement>("toggle-guidance");
  const nnBox = el<HTMLInputElement>("toggle-nn");
  const resetBtn = el<HTMLButtonElement>("reset");

  const cam = new OrbitCamera({ radius: 3, elevationDeg: 20 });
  const rolling = new RollingStats();
  let ws: WebSocket | null = null;
  let image: ImageData | null = null;

  const send = (text: string): void => {
    if (ws && ws.readyState === WebSocket.OPEN) {
      ws.send(text);
    }
  };

  bindToggle(guidanceBox, "use_guidance", send);
  bindToggle(nnBox, "use_nn", send);
  bindResetButton(resetBtn, send);

  function connect(): void {
    const proto = location.protocol === "https:" ? "wss" : "ws";
    const sock = new WebSocket(`${proto}://${location.host}/render`);
    sock.binaryType = "arraybuffer";
    ws = sock;

    sock.onopen = () => {
      banner.style.display = "none";
      sock.send(resizeMessage(canvas.width, canvas.height));
      sock.send(poseMessage(cam.matrix()));
    };
    sock.onmessage = (ev: MessageEvent) => {
      if (ev.data instanceof ArrayBuffer) {
        const frame = decodeFrame(ev.data);
        if (!frame) {
          return;
        }
        if (!image || image.width !== frame.width || image.height !== frame.height) {
          image = ctx.createImageData(frame.width, frame.height);
          canvas.width = frame.width;
          canvas.height = frame.height;
        }
        rgbToRgba(frame.pixels, image.data);
        ctx.putImageData(image, 0, 0);
        return;
      }
      const msg = parseServerMessage(String(ev.data));
      if (!msg) {
        return;
      }
      if (msg.type === "error") {
        console.warn(`server error: ${msg.message}`);
        return;
      }
      rolling.push(msg, performance.now());
    };
    sock.onclose = () => {
      banner.style.display = "block";
      ws = null;
      setTimeout(connect, RETRY_MS);
    };
  }

  // Pose emission is a fixed-rate loop, independent of frame arrival.
  setInterval(() => {
    send(poseMessage(cam.tick()));
    const m = rolling.means(performance.now());
    statsBox.textContent = m
      ? `${m.fps.toFixed(1)} fps | ${m.samplesPerRay.toFixed(1)} samples/ray | ` +
        `guided ${(m.guidedFraction * 100).toFixed(0)}% | ` +
        `volume ${m.msVolume.toFixed(1)} ms | warp ${m.msWarp.toFixed(1)} ms | ` +
        `neural ${m.msNn.toFixed(1)} ms | buffer ${m.bufferLen.toFixed(1)}`
      : "waiting for frames";
  }, 1000 / TICK_HZ);

  let dragging = false;
  canvas.addEventListener("mousedown", () => {
    dragging = true;
  });
  window.addEventListener("mouseup", () => {
    dragging = false;
  });
  window.addEventListener("mousemove", (ev: MouseEvent) => {
    if (dragging) {
      cam.drag(ev.movementX, ev.movementY);
    }
  });
  canvas.addEventListener("wheel", (ev: WheelEvent) => {
    ev.preventDefault();
    cam.wheel(Math.sign(ev.deltaY));
  });
  window.addEventListener("keydown", (ev: KeyboardEvent) => {
    const step = 0.05;
    const moves: Record<string, [number, number, number]> = {
      a: [-step, 0, 0], d: [step, 0, 0],
      w: [0, 0, step], s: [0, 0, -step],
      q: [0, step, 0], e: [0, -step, 0],
    };
    const mv = moves[ev.key.toLowerCase()];
    if (mv) {
      cam.fly(...mv);
    }
  });

  connect();
}

main();
