import { describe, expect, it } from "vitest";
import { FrameDecoder, HEADER_SIZE, MAX_PAYLOAD, MsgType, ProtocolError, encodeFrame } from "../src/protocol";

describe("frame encoding", () => {
  it("round trips a frame through the decoder", () => {
    const payload = Buffer.from("hello payload");
    const frames = new FrameDecoder().push(encodeFrame(MsgType.FORWARD, payload));
    expect(frames).toHaveLength(1);
    expect(frames[0].msgType).toBe(MsgType.FORWARD);
    expect(frames[0].payload.equals(payload)).toBe(true);
  });

  it("encodes the header as magic, type byte, u64 length", () => {
    const buf = encodeFrame(MsgType.HELLO);
    expect(buf.length).toBe(HEADER_SIZE);
    expect(buf.subarray(0, 4).toString("ascii")).toBe("A2XP");
    expect(buf.readUInt8(4)).toBe(MsgType.HELLO);
    expect(buf.readBigUInt64LE(5)).toBe(0n);
  });

  it("reassembles frames delivered one byte at a time", () => {
    const decoder = new FrameDecoder();
    const wire = Buffer.concat([
      encodeFrame(MsgType.HELLO),
      encodeFrame(MsgType.GRAD, Buffer.from([1, 2, 3])),
    ]);
    const seen: number[] = [];
    for (const byte of wire) {
      for (const frame of decoder.push(Buffer.from([byte]))) {
        seen.push(frame.msgType);
      }
    }
    expect(seen).toEqual([MsgType.HELLO, MsgType.GRAD]);
  });

  it("yields multiple frames from a single chunk", () => {
    const wire = Buffer.concat([encodeFrame(MsgType.HELLO), encodeFrame(MsgType.HELLO)]);
    expect(new FrameDecoder().push(wire)).toHaveLength(2);
  });

  it("rejects bad magic and stays poisoned", () => {
    const decoder = new FrameDecoder();
    const bad = encodeFrame(MsgType.HELLO);
    bad.write("NOPE", 0, "ascii");
    expect(() => decoder.push(bad)).toThrow(ProtocolError);
    expect(() => decoder.push(encodeFrame(MsgType.HELLO))).toThrow(ProtocolError);
  });

  it("rejects payload lengths over the cap without allocating", () => {
    const header = Buffer.alloc(HEADER_SIZE);
    header.write("A2XP", 0, "ascii");
    header.writeUInt8(MsgType.FORWARD, 4);
    header.writeBigUInt64LE(BigInt(MAX_PAYLOAD) + 1n, 5);
    expect(() => new FrameDecoder().push(header)).toThrow(/exceeds cap/);
  });
});
