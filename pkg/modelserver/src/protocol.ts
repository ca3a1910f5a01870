/**
 * Length-prefixed binary frames: "A2XP" + u8 message type + u64 LE payload
 * length + payload. Strictly request/response, one reply per request.
 */

export const MAGIC = Buffer.from("A2XP", "ascii");
export const HEADER_SIZE = MAGIC.length + 1 + 8;

// Corrupt length fields should fail fast, not trigger a giant allocation.
export const MAX_PAYLOAD = 1 << 30;

export enum MsgType {
  HELLO = 1,
  INFO = 2,
  FORWARD = 3,
  LOGITS = 4,
  GRADIENT = 5,
  GRAD = 6,
  ERROR = 255,
}

export class ProtocolError extends Error {}

export interface Frame {
  msgType: number;
  payload: Buffer;
}

export function encodeFrame(msgType: number, payload: Buffer = Buffer.alloc(0)): Buffer {
  const header = Buffer.alloc(HEADER_SIZE);
  MAGIC.copy(header, 0);
  header.writeUInt8(msgType, MAGIC.length);
  header.writeBigUInt64LE(BigInt(payload.length), MAGIC.length + 1);
  return Buffer.concat([header, payload]);
}

/**
 * Incremental decoder for a byte stream that arrives in arbitrary chunks.
 * push() returns every frame completed by the new bytes; a malformed header
 * throws ProtocolError and poisons the decoder, since the stream position
 * can no longer be trusted.
 */
export class FrameDecoder {
  private pending: Buffer = Buffer.alloc(0);
  private poisoned = false;

  push(chunk: Buffer): Frame[] {
    if (this.poisoned) {
      throw new ProtocolError("decoder poisoned by earlier malformed header");
    }
    this.pending = this.pending.length === 0 ? chunk : Buffer.concat([this.pending, chunk]);
    const frames: Frame[] = [];
    for (;;) {
      if (this.pending.length < HEADER_SIZE) {
        return frames;
      }
      if (!this.pending.subarray(0, MAGIC.length).equals(MAGIC)) {
        this.poisoned = true;
        throw new ProtocolError(`bad magic ${this.pending.subarray(0, MAGIC.length).toString("hex")}`);
      }
      const msgType = this.pending.readUInt8(MAGIC.length);
      const payloadLen = this.pending.readBigUInt64LE(MAGIC.length + 1);
      if (payloadLen > BigInt(MAX_PAYLOAD)) {
        this.poisoned = true;
        throw new ProtocolError(`frame payload of ${payloadLen} bytes exceeds cap ${MAX_PAYLOAD}`);
      }
      const total = HEADER_SIZE + Number(payloadLen);
      if (this.pending.length < total) {
        return frames;
      }
      frames.push({ msgType, payload: this.pending.subarray(HEADER_SIZE, total) });
      this.pending = this.pending.subarray(total);
    }
  }
}
