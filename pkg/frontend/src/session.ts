// Pure annotation-session state: marker edits, commit gating, dirty
// tracking, and latest-wins versioning for server preview responses.
// No DOM and no fetch in here so the whole thing is unit-testable.

export interface Marker {
  x: number;
  y: number;
}

export interface Session {
  markers: Marker[];
  // markers as of the last commit (or as loaded from the server); null
  // means the frame has never been committed in this session
  committed: Marker[] | null;
  // last polyline accepted from the server, verbatim
  preview: [number, number][] | null;
  // true when the overlay no longer corresponds to the current markers
  // (a preview request failed); edits are kept either way
  previewStale: boolean;
  // bumped on every marker mutation; preview responses carry the version
  // of the markers they were computed from
  version: number;
}

export const HIT_RADIUS_PX = 8;

export function newSession(): Session {
  return { markers: [], committed: null, preview: null, previewStale: false, version: 0 };
}

function cloneMarkers(markers: Marker[]): Marker[] {
  return markers.map((m) => ({ x: m.x, y: m.y }));
}

function sameMarkers(a: Marker[], b: Marker[]): boolean {
  if (a.length !== b.length) return false;
  for (let i = 0; i < a.length; i++) {
    const p = a[i]!;
    const q = b[i]!;
    if (p.x !== q.x || p.y !== q.y) return false;
  }
  return true;
}

// Index of the topmost marker within the hit radius, or -1. x/y are in
// image coordinates; the 8 px radius is defined at 1x zoom, so a zoomed
// display shrinks the image-space radius accordingly.
export function hitTest(markers: Marker[], x: number, y: number, zoom = 1): number {
  const r = HIT_RADIUS_PX / zoom;
  for (let i = markers.length - 1; i >= 0; i--) {
    const m = markers[i]!;
    const dx = m.x - x;
    const dy = m.y - y;
    if (dx * dx + dy * dy <= r * r) return i;
  }
  return -1;
}

function bump(s: Session): void {
  s.version += 1;
  s.previewStale = false;
  if (s.markers.length < 2) s.preview = null; // no curve to show below 2 markers
}

export function placeMarker(s: Session, x: number, y: number): void {
  s.markers.push({ x, y });
  bump(s);
}

export function dragMarker(s: Session, index: number, x: number, y: number): void {
  const m = s.markers[index];
  if (!m) return;
  m.x = x;
  m.y = y;
  bump(s);
}

export function deleteMarker(s: Session, index: number): void {
  if (index < 0 || index >= s.markers.length) return;
  s.markers.splice(index, 1);
  bump(s);
}

export function canCommit(s: Session): boolean {
  return s.markers.length >= 2;
}

export function isDirty(s: Session): boolean {
  if (s.committed === null) return s.markers.length > 0;
  return !sameMarkers(s.markers, s.committed);
}

// Accept a preview only if it was computed from the current markers;
// anything older is a superseded request and is dropped.
export function applyPreview(s: Session, version: number, polyline: [number, number][]): boolean {
  if (version !== s.version) return false;
  s.preview = polyline;
  s.previewStale = false;
  return true;
}

// A failed preview request leaves the markers alone but flags the overlay
// as stale, unless a newer edit already superseded the request.
export function markPreviewFailed(s: Session, version: number): void {
  if (version === s.version) s.previewStale = true;
}

export function markCommitted(s: Session): void {
  s.committed = cloneMarkers(s.markers);
}

// Server state loaded on frame entry counts as the committed baseline:
// reloading a committed frame must come up clean, not dirty.
export function loadMarkers(s: Session, markers: [number, number][]): void {
  s.markers = markers.map(([x, y]) => ({ x, y }));
  s.committed = cloneMarkers(s.markers);
  s.preview = null;
  s.previewStale = false;
  s.version += 1;
}
