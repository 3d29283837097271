//! RPC shim for out-of-process backbones.
//!
//! A frame is a JSON control object plus named float32 tensors:
//!
//! ```text
//! "ESHM" | u32 json_len | json | u32 count | count x (u32 name_len | name | u32 ndim | ndim x u32 | f32 data)
//! ```
//!
//! Little-endian throughout. On a stream each frame is preceded by its
//! byte length as a `u32`. Requests carry `{"op": ...}`; failed requests
//! are answered with `{"error": ..., "kind": ...}`.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    AdapterGrads, DenoiseOutput, DiffusionBackbone, NoiseSchedule, ProjectionInfo, TokenId,
    TrainingPass,
};
use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::lora::LoraState;
use crate::tensor::{put_shape_and_data, put_u32, NamedTensor, Reader, MAX_NAME};
use crate::types::{ImageTensor, LatentShape, LatentTensor};

const MAGIC: &[u8; 4] = b"ESHM";
const MAX_FRAME: usize = 1 << 30;
const MAX_TENSORS: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub control: Value,
    pub tensors: Vec<NamedTensor>,
}

impl Frame {
    pub fn new(control: Value) -> Self {
        Self {
            control,
            tensors: Vec::new(),
        }
    }

    pub fn with(mut self, tensor: NamedTensor) -> Self {
        self.tensors.push(tensor);
        self
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::from(&MAGIC[..]);
        let json = serde_json::to_vec(&self.control).expect("json values always serialize");
        put_u32(&mut out, json.len());
        out.extend_from_slice(&json);
        put_u32(&mut out, self.tensors.len());
        for t in &self.tensors {
            put_u32(&mut out, t.name.len());
            out.extend_from_slice(t.name.as_bytes());
            put_shape_and_data(&mut out, &t.shape, &t.data);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Wire("bad frame magic".into()));
        }
        let json_len = r.u32()?;
        let control: Value = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| Error::Wire(format!("control json: {e}")))?;
        if !control.is_object() {
            return Err(Error::Wire("control must be a json object".into()));
        }
        let count = r.u32()?;
        if count > MAX_TENSORS {
            return Err(Error::Wire(format!("{count} tensors in one frame")));
        }
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32()?;
            if len > MAX_NAME {
                return Err(Error::Wire(format!("tensor name of {len} bytes")));
            }
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Wire("tensor name is not utf-8".into()))?
                .to_owned();
            let (shape, data) = r.shape_and_data()?;
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.remaining() != 0 {
            return Err(Error::Wire(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Frame { control, tensors })
    }

    fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Wire(format!("frame has no tensor {name}")))
    }

    fn field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .control
            .get(key)
            .ok_or_else(|| Error::Wire(format!("control has no {key}")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Wire(format!("{key}: {e}")))
    }
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<()> {
    let bytes = frame.encode();
    if bytes.len() > MAX_FRAME {
        return Err(Error::Wire("frame too large".into()));
    }
    let io = |e| Error::Transport {
        client: "shim".into(),
        message: format!("write: {e}"),
    };
    w.write_all(&(bytes.len() as u32).to_le_bytes())
        .map_err(io)?;
    w.write_all(&bytes).map_err(io)?;
    w.flush().map_err(io)
}

/// Reads one length-prefixed frame; `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>> {
    let io = |e: std::io::Error| Error::Transport {
        client: "shim".into(),
        message: format!("read: {e}"),
    };
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(io(e)),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(Error::Wire(format!("frame of {len} bytes exceeds limit")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(io)?;
    Frame::decode(&buf).map(Some)
}

fn latent_tensor(name: &str, z: &LatentTensor) -> NamedTensor {
    NamedTensor {
        name: name.into(),
        shape: vec![z.height(), z.width(), z.channels()],
        data: z.data().to_vec(),
    }
}

fn to_latent(t: &NamedTensor) -> Result<LatentTensor> {
    match t.shape[..] {
        [h, w, c] => LatentTensor::new(h, w, c, t.data.clone()),
        _ => Err(Error::Wire(format!("{} is not a latent", t.name))),
    }
}

fn image_tensor(name: &str, img: &ImageTensor) -> NamedTensor {
    NamedTensor {
        name: name.into(),
        shape: vec![img.height(), img.width(), img.channels()],
        data: img.data().to_vec(),
    }
}

fn to_image(t: &NamedTensor) -> Result<ImageTensor> {
    match t.shape[..] {
        [h, w, c] => ImageTensor::from_unclamped(h, w, c, t.data.clone()),
        _ => Err(Error::Wire(format!("{} is not an image", t.name))),
    }
}

fn attention_tensor(maps: &[Vec<f64>]) -> NamedTensor {
    let n = maps.first().map_or(0, Vec::len);
    NamedTensor {
        name: "attention".into(),
        shape: vec![maps.len(), n],
        data: maps.concat(),
    }
}

fn to_maps(t: &NamedTensor) -> Result<Vec<Vec<f64>>> {
    match t.shape[..] {
        [l, n] => Ok(t
            .data
            .chunks(n.max(1))
            .take(l)
            .map(<[f64]>::to_vec)
            .collect()),
        _ => Err(Error::Wire(format!("{} is not a stack of maps", t.name))),
    }
}

fn output_frame(out: &DenoiseOutput, control: Value) -> Frame {
    Frame::new(control)
        .with(latent_tensor("z0", &out.z0))
        .with(attention_tensor(&out.attention))
}

fn to_output(frame: &Frame) -> Result<DenoiseOutput> {
    Ok(DenoiseOutput {
        z0: to_latent(frame.tensor("z0")?)?,
        attention: to_maps(frame.tensor("attention")?)?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Description {
    latent: LatentShape,
    image_dims: (usize, usize),
    schedule_steps: usize,
    projections: Vec<ProjectionInfo>,
    blocks: usize,
}

/// Client side: a backbone living behind a TCP shim.
pub struct ShimBackbone {
    stream: Mutex<TcpStream>,
    desc: Description,
}

impl ShimBackbone {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(|e| Error::Transport {
            client: "shim".into(),
            message: format!("connect: {e}"),
        })?;
        let mut me = Self {
            stream: Mutex::new(stream),
            desc: Description {
                latent: LatentShape {
                    height: 0,
                    width: 0,
                    channels: 0,
                },
                image_dims: (0, 0),
                schedule_steps: 1,
                projections: Vec::new(),
                blocks: 0,
            },
        };
        let resp = me.call(Frame::new(json!({"op": "describe"})))?;
        me.desc = resp.field("description")?;
        Ok(me)
    }

    fn call(&self, request: Frame) -> Result<Frame> {
        let mut stream = self.stream.lock().expect("shim stream lock poisoned");
        write_frame(&mut *stream, &request)?;
        let resp = read_frame(&mut *stream)?.ok_or_else(|| Error::Transport {
            client: "shim".into(),
            message: "server closed the connection".into(),
        })?;
        if let Some(err) = resp.control.get("error") {
            let message = err.as_str().unwrap_or("unknown").to_owned();
            return Err(match resp.control.get("kind").and_then(Value::as_str) {
                Some("merged") => Error::AlreadyMerged,
                Some("shape") => Error::Shape(message),
                _ => Error::Invalid(format!("shim: {message}")),
            });
        }
        Ok(resp)
    }

    fn with_adapters(mut frame: Frame, adapters: Option<&LoraState>) -> Frame {
        if let Some(lora) = adapters {
            frame.control["adapters"] = json!(true);
            frame.control["merged"] = json!(lora.is_merged());
            frame.tensors.extend(lora.to_tensors());
        }
        frame
    }
}

struct ShimPass<'a> {
    shim: &'a ShimBackbone,
    pass_id: u64,
    output: DenoiseOutput,
}

impl TrainingPass for ShimPass<'_> {
    fn output(&self) -> &DenoiseOutput {
        &self.output
    }

    fn backward(self: Box<Self>, d_z0: &[f64], d_attention: &[Vec<f64>]) -> Result<AdapterGrads> {
        let z = &self.output.z0;
        let resp = self.shim.call(
            Frame::new(json!({"op": "train_backward", "pass_id": self.pass_id}))
                .with(NamedTensor::new(
                    "d_z0",
                    vec![z.height(), z.width(), z.channels()],
                    d_z0.to_vec(),
                )?)
                .with(NamedTensor {
                    name: "d_attention".into(),
                    ..attention_tensor(d_attention)
                }),
        )?;
        grads_from_tensors(&resp.tensors)
    }
}

fn grads_from_tensors(tensors: &[NamedTensor]) -> Result<AdapterGrads> {
    let mut out: BTreeMap<String, (Option<Mat>, Option<Mat>)> = BTreeMap::new();
    for t in tensors {
        let [r, c] = t.shape[..] else {
            return Err(Error::Wire(format!("{} is not a matrix", t.name)));
        };
        let m = Mat::from_vec(r, c, t.data.clone());
        if let Some(base) = t.name.strip_suffix(".lora_down") {
            out.entry(base.into()).or_default().0 = Some(m);
        } else if let Some(base) = t.name.strip_suffix(".lora_up") {
            out.entry(base.into()).or_default().1 = Some(m);
        }
    }
    out.into_iter()
        .map(|(k, v)| match v {
            (Some(d), Some(u)) => Ok((k, (d, u))),
            _ => Err(Error::Wire(format!("incomplete gradient for {k}"))),
        })
        .collect()
}

fn grads_to_tensors(grads: &AdapterGrads) -> Vec<NamedTensor> {
    grads
        .iter()
        .flat_map(|(name, (d, u))| {
            [
                NamedTensor {
                    name: format!("{name}.lora_down"),
                    shape: vec![d.rows, d.cols],
                    data: d.data.clone(),
                },
                NamedTensor {
                    name: format!("{name}.lora_up"),
                    shape: vec![u.rows, u.cols],
                    data: u.data.clone(),
                },
            ]
        })
        .collect()
}

impl DiffusionBackbone for ShimBackbone {
    fn latent_shape(&self) -> LatentShape {
        self.desc.latent
    }

    fn image_dims(&self) -> (usize, usize) {
        self.desc.image_dims
    }

    fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::cosine(self.desc.schedule_steps)
    }

    fn encode(&self, image: &ImageTensor) -> Result<LatentTensor> {
        let resp =
            self.call(Frame::new(json!({"op": "encode"})).with(image_tensor("image", image)))?;
        to_latent(resp.tensor("latent")?)
    }

    fn decode(&self, latent: &LatentTensor) -> Result<ImageTensor> {
        let resp =
            self.call(Frame::new(json!({"op": "decode"})).with(latent_tensor("latent", latent)))?;
        to_image(resp.tensor("image")?)
    }

    fn tokenize(&self, tags: &[String]) -> Result<Vec<TokenId>> {
        self.call(Frame::new(json!({"op": "tokenize", "tags": tags})))?
            .field("ids")
    }

    fn attention_projections(&self) -> Result<Vec<ProjectionInfo>> {
        Ok(self.desc.projections.clone())
    }

    fn attention_blocks(&self) -> Result<usize> {
        Ok(self.desc.blocks)
    }

    fn denoise_step(
        &self,
        z_t: &LatentTensor,
        t: usize,
        cond: &[TokenId],
        adapters: Option<&LoraState>,
    ) -> Result<DenoiseOutput> {
        let frame = Frame::new(json!({"op": "denoise", "t": t, "cond": cond}))
            .with(latent_tensor("z_t", z_t));
        to_output(&self.call(Self::with_adapters(frame, adapters))?)
    }

    fn training_pass<'a>(
        &'a self,
        z_t: &LatentTensor,
        t: usize,
        cond: &[TokenId],
        adapters: &LoraState,
    ) -> Result<Box<dyn TrainingPass + 'a>> {
        let frame = Frame::new(json!({"op": "train_forward", "t": t, "cond": cond}))
            .with(latent_tensor("z_t", z_t));
        let resp = self.call(Self::with_adapters(frame, Some(adapters)))?;
        Ok(Box::new(ShimPass {
            shim: self,
            pass_id: resp.field("pass_id")?,
            output: to_output(&resp)?,
        }))
    }

    fn base_weights(&self) -> Result<Vec<NamedTensor>> {
        Ok(self
            .call(Frame::new(json!({"op": "base_weights"})))?
            .tensors)
    }

    fn merge_weights(&mut self, adapters: &LoraState) -> Result<()> {
        let frame = Frame::new(json!({"op": "merge"}));
        self.call(Self::with_adapters(frame, Some(adapters)))
            .map(|_| ())
    }
}

fn error_frame(e: &Error) -> Frame {
    let kind = match e {
        Error::AlreadyMerged => "merged",
        Error::Shape(_) => "shape",
        _ => "invalid",
    };
    Frame::new(json!({"error": e.to_string(), "kind": kind}))
}

fn adapters_of(frame: &Frame) -> Result<Option<LoraState>> {
    if frame.control.get("adapters") != Some(&json!(true)) {
        return Ok(None);
    }
    let tensors = frame
        .tensors
        .iter()
        .filter(|t| t.name == "lora.scale" || t.name.contains(".lora_"))
        .cloned()
        .collect();
    let lora = LoraState::from_tensors(tensors)?;
    if frame.control.get("merged") == Some(&json!(true)) {
        return Err(Error::AlreadyMerged);
    }
    Ok(Some(lora))
}

enum Next {
    Reply(Frame),
    Merge(LoraState),
}

fn handle<'a>(
    backbone: &'a dyn DiffusionBackbone,
    passes: &mut HashMap<u64, Box<dyn TrainingPass + 'a>>,
    next_id: &mut u64,
    req: &Frame,
) -> Result<Next> {
    let op: String = req.field("op")?;
    let reply = match op.as_str() {
        "describe" => {
            let desc = Description {
                latent: backbone.latent_shape(),
                image_dims: backbone.image_dims(),
                schedule_steps: backbone.schedule().steps,
                projections: backbone.attention_projections()?,
                blocks: backbone.attention_blocks()?,
            };
            Frame::new(json!({ "description": desc }))
        }
        "encode" => {
            let z = backbone.encode(&to_image(req.tensor("image")?)?)?;
            Frame::new(json!({})).with(latent_tensor("latent", &z))
        }
        "decode" => {
            let img = backbone.decode(&to_latent(req.tensor("latent")?)?)?;
            Frame::new(json!({})).with(image_tensor("image", &img))
        }
        "tokenize" => {
            let tags: Vec<String> = req.field("tags")?;
            Frame::new(json!({ "ids": backbone.tokenize(&tags)? }))
        }
        "denoise" => {
            let lora = adapters_of(req)?;
            let out = backbone.denoise_step(
                &to_latent(req.tensor("z_t")?)?,
                req.field("t")?,
                &req.field::<Vec<TokenId>>("cond")?,
                lora.as_ref(),
            )?;
            output_frame(&out, json!({}))
        }
        "train_forward" => {
            let lora = adapters_of(req)?
                .ok_or_else(|| Error::Invalid("train_forward needs adapters".into()))?;
            let pass = backbone.training_pass(
                &to_latent(req.tensor("z_t")?)?,
                req.field("t")?,
                &req.field::<Vec<TokenId>>("cond")?,
                &lora,
            )?;
            *next_id += 1;
            let frame = output_frame(pass.output(), json!({ "pass_id": *next_id }));
            passes.insert(*next_id, pass);
            frame
        }
        "train_backward" => {
            let id: u64 = req.field("pass_id")?;
            let pass = passes
                .remove(&id)
                .ok_or_else(|| Error::Invalid(format!("unknown pass {id}")))?;
            let z = req.tensor("d_z0")?;
            let grads = pass.backward(&z.data, &to_maps(req.tensor("d_attention")?)?)?;
            let mut f = Frame::new(json!({}));
            f.tensors = grads_to_tensors(&grads);
            f
        }
        "base_weights" => {
            let mut f = Frame::new(json!({}));
            f.tensors = backbone.base_weights()?;
            f
        }
        "merge" => {
            let lora =
                adapters_of(req)?.ok_or_else(|| Error::Invalid("merge needs adapters".into()))?;
            return Ok(Next::Merge(lora));
        }
        other => return Err(Error::Invalid(format!("unknown op {other:?}"))),
    };
    Ok(Next::Reply(reply))
}

/// Serves one client connection against `backbone` until it disconnects.
pub fn serve_connection(backbone: &mut dyn DiffusionBackbone, stream: TcpStream) -> Result<()> {
    let mut reader = stream.try_clone().map_err(|e| Error::Transport {
        client: "shim".into(),
        message: e.to_string(),
    })?;
    let mut writer = stream;
    loop {
        let pending_merge = {
            let mut passes = HashMap::new();
            let mut next_id = 0u64;
            loop {
                let Some(req) = read_frame(&mut reader)? else {
                    return Ok(());
                };
                match handle(&*backbone, &mut passes, &mut next_id, &req) {
                    Ok(Next::Reply(f)) => write_frame(&mut writer, &f)?,
                    Ok(Next::Merge(lora)) => break lora,
                    Err(e) => write_frame(&mut writer, &error_frame(&e))?,
                }
            }
        };
        match backbone.merge_weights(&pending_merge) {
            Ok(()) => write_frame(&mut writer, &Frame::new(json!({})))?,
            Err(e) => write_frame(&mut writer, &error_frame(&e))?,
        }
    }
}

/// Accepts connections one at a time and serves each to completion.
pub fn serve(listener: TcpListener, mut backbone: Box<dyn DiffusionBackbone>) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream.map_err(|e| Error::Transport {
            client: "shim".into(),
            message: e.to_string(),
        })?;
        if let Err(e) = serve_connection(backbone.as_mut(), stream) {
            log::warn!("shim connection ended with error: {e}");
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frame_roundtrip() {
        let f = Frame::new(json!({"op": "x", "t": 3}))
            .with(NamedTensor::new("a", vec![2, 1], vec![0.5, -1.0]).unwrap());
        assert_eq!(Frame::decode(&f.encode()).unwrap(), f);
    }

    #[test]
    fn rejects_non_object_control() {
        let mut bytes = Vec::from(&MAGIC[..]);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(b"[]");
        bytes.extend_from_slice(&0u32.to_le_bytes());
        assert!(Frame::decode(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let _ = Frame::decode(&bytes);
            let mut prefixed = MAGIC.to_vec();
            prefixed.extend_from_slice(&bytes);
            let _ = Frame::decode(&prefixed);
        }
    }
}
