// Wire types for the annotation service. Field names match the server's
// JSON exactly; nothing here is derived client-side.

export interface FrameInfo {
  id: string;
  annotated: boolean;
  committed: boolean;
}

export interface FramesResponse {
  frames: FrameInfo[];
}

export interface StoredMarkers {
  frame_id: string;
  markers: [number, number][];
  created_at: number;
}

export interface PreviewResponse {
  frame_id: string;
  polyline: [number, number][];
  sample_count: number;
  degree: number;
}

export interface CommitResponse {
  status: string;
  mask: string;
  clipped: boolean;
}
