import { Readable, Writable } from "stream";
import { FrameDecoder, MsgType, ProtocolError, encodeFrame } from "./protocol";
import { ServedModel } from "./tinymodel";

function readF32(payload: Buffer, offset: number, count: number): Float64Array {
  const out = new Float64Array(count);
  for (let i = 0; i < count; i++) {
    out[i] = payload.readFloatLE(offset + i * 4);
  }
  return out;
}

function writeF32(values: Float64Array): Buffer {
  const out = Buffer.alloc(values.length * 4);
  for (let i = 0; i < values.length; i++) {
    out.writeFloatLE(Math.fround(values[i]), i * 4);
  }
  return out;
}

/**
 * One reply frame per request frame. Malformed requests get an ERROR reply
 * and the session keeps serving; only an unparseable stream ends it.
 */
export function handleRequest(model: ServedModel, msgType: number, payload: Buffer): Buffer {
  const p = model.dims[0] * model.dims[1] * model.dims[2];
  try {
    switch (msgType) {
      case MsgType.HELLO: {
        const info = {
          dims: model.dims,
          has_gradient: model.hasGradient,
          name: model.name,
          num_classes: model.numClasses,
        };
        return encodeFrame(MsgType.INFO, Buffer.from(JSON.stringify(info), "utf-8"));
      }
      case MsgType.FORWARD: {
        if (payload.length !== p * 4) {
          throw new Error(`FORWARD payload ${payload.length} bytes, expected ${p * 4}`);
        }
        const logits = model.forward(readF32(payload, 0, p));
        return encodeFrame(MsgType.LOGITS, writeF32(logits));
      }
      case MsgType.GRADIENT: {
        if (payload.length !== 4 + p * 5) {
          throw new Error(`GRADIENT payload ${payload.length} bytes, expected ${4 + p * 5}`);
        }
        const classIndex = payload.readUInt32LE(0);
        const voxels = readF32(payload, 4, p);
        const mask = Uint8Array.prototype.slice.call(payload, 4 + p * 4);
        const grad = model.gradient(voxels, classIndex, mask);
        return encodeFrame(MsgType.GRAD, writeF32(grad));
      }
      default:
        throw new Error(`unknown message type ${msgType}`);
    }
  } catch (err) {
    const text = err instanceof Error ? err.message : String(err);
    return encodeFrame(MsgType.ERROR, Buffer.from(text, "utf-8"));
  }
}

/**
 * Serve one connection: decode frames from `input`, answer each on `output`.
 * Returns a promise that settles when the peer hangs up or desyncs the
 * stream (bad magic, oversized length), at which point there is nothing
 * sane to reply to and the connection is dropped.
 */
export function serveStream(model: ServedModel, input: Readable, output: Writable): Promise<void> {
  const decoder = new FrameDecoder();
  return new Promise((resolve) => {
    let done = false;
    const finish = () => {
      if (!done) {
        done = true;
        input.removeListener("data", onData);
        resolve();
      }
    };
    const onData = (chunk: Buffer) => {
      let frames;
      try {
        frames = decoder.push(chunk);
      } catch (err) {
        if (!(err instanceof ProtocolError)) throw err;
        finish();
        return;
      }
      for (const frame of frames) {
        output.write(handleRequest(model, frame.msgType, frame.payload));
      }
    };
    input.on("data", onData);
    input.once("end", finish);
    input.once("error", finish);
    output.once("error", finish);
  });
}
