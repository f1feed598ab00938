/** Browser entry point: canvas, mouse orbit controls and render options. */

import { RenderClient } from "./client.js";
import { FpsMeter } from "./fps.js";
import { clampOrbit, OrbitState, poseFromOrbit } from "./orbit.js";
import { Frame, frameToRGBA } from "./protocol.js";

const SAMPLE_CHOICES = [1, 2, 4, 8];

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

export function startViewer(url: string): void {
  const canvas = el<HTMLCanvasElement>("view");
  const ctx = canvas.getContext("2d");
  if (!ctx) throw new Error("2d canvas context unavailable");
  const statsBox = el<HTMLElement>("stats");
  const modeSel = el<HTMLSelectElement>("mode");
  const samplesSel = el<HTMLSelectElement>("samples");
  const depthToggle = el<HTMLInputElement>("depth");

  for (const n of SAMPLE_CHOICES) {
    const opt = document.createElement("option");
    opt.value = String(n);
    opt.textContent = `${n} samples`;
    samplesSel.appendChild(opt);
  }
  samplesSel.value = "2";

  let orbit: OrbitState = {
    azimuthDeg: 30,
    elevationDeg: 25,
    radius: 4,
    target: [0, 0, 0],
  };
  let lastFrame: Frame | null = null;
  const meter = new FpsMeter();

  const draw = (frame: Frame) => {
    lastFrame = frame;
    canvas.width = frame.width;
    canvas.height = frame.height;
    const rgba = frameToRGBA(frame, depthToggle.checked);
    ctx.putImageData(new ImageData(rgba, frame.width, frame.height), 0, 0);
  };

  const client = new RenderClient(url, {
    onScene: (scene) => {
      orbit = { ...orbit, target: scene.center, radius: scene.far * 0.55 };
      canvas.width = scene.width;
      canvas.height = scene.height;
      requestRender();
    },
    onFrame: (frame) => {
      meter.tick(performance.now());
      draw(frame);
    },
    onStats: (stats) => {
      statsBox.textContent =
        `${stats.mode}/${stats.n_samples}  ` +
        `${stats.render_ms.toFixed(0)} ms  ${meter.fps.toFixed(1)} fps`;
    },
    onError: (reason) => {
      statsBox.textContent = `error: ${reason}`;
    },
    onClose: () => {
      statsBox.textContent = "disconnected";
    },
  });

  function requestRender(): void {
    const scene = client.scene;
    if (!scene) return;
    const uniform = modeSel.value === "uniform";
    client.request({
      pose: poseFromOrbit(orbit, scene.width, scene.height),
      width: scene.width,
      height: scene.height,
      mode: uniform ? "uniform" : "guided",
      nSamples: uniform ? 64 : Number(samplesSel.value),
      requestDepth: depthToggle.checked,
    });
  }

  let dragging = false;
  let lastX = 0;
  let lastY = 0;
  canvas.addEventListener("mousedown", (ev) => {
    dragging = true;
    lastX = ev.clientX;
    lastY = ev.clientY;
  });
  window.addEventListener("mouseup", () => {
    dragging = false;
  });
  window.addEventListener("mousemove", (ev) => {
    if (!dragging) return;
    orbit = clampOrbit({
      ...orbit,
      azimuthDeg: orbit.azimuthDeg - (ev.clientX - lastX) * 0.5,
      elevationDeg: orbit.elevationDeg + (ev.clientY - lastY) * 0.5,
    });
    lastX = ev.clientX;
    lastY = ev.clientY;
    requestRender();
  });
  canvas.addEventListener("wheel", (ev) => {
    ev.preventDefault();
    orbit = clampOrbit({
      ...orbit,
      radius: orbit.radius * Math.exp(ev.deltaY * 0.001),
    });
    requestRender();
  });
  modeSel.addEventListener("change", requestRender);
  samplesSel.addEventListener("change", requestRender);
  depthToggle.addEventListener("change", () => {
    if (lastFrame && lastFrame.channels === 4) {
      draw(lastFrame); // re-composite locally, no round trip needed
    } else {
      requestRender();
    }
  });
}
