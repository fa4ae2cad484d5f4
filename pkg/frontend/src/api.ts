// Thin typed client for the annotation service. Every call goes through
// the documented HTTP surface; there is no other protocol.

import type { CommitResponse, FramesResponse, PreviewResponse, StoredMarkers } from "./types.js";

export class ApiError extends Error {
  constructor(readonly status: number, detail: string) {
    super(detail);
  }
}

async function failOn(res: Response): Promise<void> {
  if (res.ok) return;
  let detail = res.statusText;
  try {
    const body = await res.json();
    if (typeof body.detail === "string") detail = body.detail;
  } catch {
    // non-JSON error body; keep the status text
  }
  throw new ApiError(res.status, detail);
}

export async function listFrames(): Promise<FramesResponse> {
  const res = await fetch("frames");
  await failOn(res);
  return res.json();
}

export function imageUrl(frameId: string): string {
  return `frames/${encodeURIComponent(frameId)}/image`;
}

// 404 (nothing stored yet) is a normal outcome here, mapped to null.
export async function getMarkers(frameId: string): Promise<StoredMarkers | null> {
  const res = await fetch(`frames/${encodeURIComponent(frameId)}/markers`);
  if (res.status === 404) return null;
  await failOn(res);
  return res.json();
}

export async function postMarkers(
  frameId: string,
  markers: [number, number][],
  signal?: AbortSignal,
): Promise<PreviewResponse> {
  const res = await fetch(`frames/${encodeURIComponent(frameId)}/markers`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({ markers }),
    signal,
  });
  await failOn(res);
  return res.json();
}

export async function commitFrame(frameId: string, thickness = 3): Promise<CommitResponse> {
  const res = await fetch(`frames/${encodeURIComponent(frameId)}/commit`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({ thickness }),
  });
  await failOn(res);
  return res.json();
}
