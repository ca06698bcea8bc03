//! Parameter sharing between a stored parent and a newly coded child.
//!
//! Width sharing copies the leading `(w, h, min(ch_in), min(ch_out))` corner
//! of the stored kernel; depth sharing copies the first `min(l_u, l_w)`
//! layers of a block. Everything not inherited is drawn from the `Gamma`
//! initializer, a normal distribution described by [`WeightInitSpec`].
//!
//! Kernels are stored as [`ParamMatrix`] values in `(w, h, ch_in, ch_out)`
//! layout, row-major with `ch_out` varying fastest. A layer contributes one
//! matrix per convolution stage (see [`TensorPart`]).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::{Arc, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluators::fnv1a64;
use crate::metrics::resolve_channel_plan;
use crate::search_space::{ArchCode, ConvOp, Kernel, SearchSpaceConfig};

/// A 4-D kernel `(w, h, ch_in, ch_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMatrix {
    shape: [usize; 4],
    values: Vec<f32>,
}

impl ParamMatrix {
    pub fn new(shape: [usize; 4], values: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero dimension in {shape:?}")));
        }
        if values.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "{} values for shape {shape:?}",
                values.len()
            )));
        }
        Ok(ParamMatrix { shape, values })
    }

    /// Matrix with every element drawn from `init`.
    pub fn random(shape: [usize; 4], init: &WeightInitSpec) -> Self {
        let mut sampler = init.sampler(shape);
        let values = (0..shape.iter().product()).map(|_| sampler.draw()).collect();
        ParamMatrix { shape, values }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, i: usize, o: usize) -> usize {
        let [_, h, cin, cout] = self.shape;
        ((x * h + y) * cin + i) * cout + o
    }

    pub fn get(&self, x: usize, y: usize, i: usize, o: usize) -> f32 {
        self.values[self.index(x, y, i, o)]
    }
}

/// How the `Gamma` initializer picks its standard deviation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScaling {
    /// Use `std` as given.
    #[default]
    Fixed,
    /// `sqrt(2 / fan_in)` with `fan_in = w * h * ch_in`.
    FanIn,
}

/// Normal random initializer for non-inherited parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightInitSpec {
    pub mean: f32,
    pub std: f32,
    pub scaling: InitScaling,
    pub seed: u64,
}

impl Default for WeightInitSpec {
    fn default() -> Self {
        WeightInitSpec {
            mean: 0.0,
            std: 0.01,
            scaling: InitScaling::Fixed,
            seed: 0,
        }
    }
}

impl WeightInitSpec {
    pub fn with_seed(self, seed: u64) -> Self {
        WeightInitSpec { seed, ..self }
    }

    /// Independent stream for one tensor, keyed by signature.
    fn for_signature(&self, sig: &LayerSignature) -> Self {
        let key = [
            sig.block_index as u64,
            sig.layer_index as u64,
            sig.op as u64,
            sig.kernel.size(),
            sig.part as u64,
        ];
        let bytes: Vec<u8> = key.iter().flat_map(|k| k.to_le_bytes()).collect();
        self.with_seed(self.seed ^ fnv1a64(&bytes))
    }

    fn for_layer(&self, layer: usize) -> Self {
        self.with_seed(self.seed ^ fnv1a64(&(layer as u64).to_le_bytes()))
    }

    fn sampler(&self, shape: [usize; 4]) -> Sampler {
        let std = match self.scaling {
            InitScaling::Fixed => self.std,
            InitScaling::FanIn => (2.0 / (shape[0] * shape[1] * shape[2]) as f32).sqrt(),
        };
        Sampler {
            rng: ChaCha8Rng::seed_from_u64(self.seed),
            normal: Normal::new(self.mean, std).expect("initializer std must be finite and positive"),
        }
    }
}

struct Sampler {
    rng: ChaCha8Rng,
    normal: Normal<f32>,
}

impl Sampler {
    fn draw(&mut self) -> f32 {
        self.normal.sample(&mut self.rng)
    }
}

/// A matrix produced by sharing, with the number of freshly drawn elements.
#[derive(Debug, Clone, PartialEq)]
pub struct Shared<T> {
    pub value: T,
    pub fresh_elements: usize,
}

/// Width-level sharing: copy the overlapping channel corner of `old`, draw
/// the rest from `init`.
///
/// Kernel sides must match; mismatched kernels are not shared.
pub fn share_width(new_shape: [usize; 4], old: &ParamMatrix, init: &WeightInitSpec) -> Result<Shared<ParamMatrix>> {
    let [w, h, cin, cout] = new_shape;
    let [ow, oh, ocin, ocout] = old.shape;
    if (w, h) != (ow, oh) {
        return Err(Error::Shape(format!(
            "kernel {w}x{h} cannot share from {ow}x{oh}"
        )));
    }
    if new_shape.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("zero dimension in {new_shape:?}")));
    }
    let shared_in = cin.min(ocin);
    let shared_out = cout.min(ocout);
    let mut sampler = init.sampler(new_shape);
    let mut values = Vec::with_capacity(new_shape.iter().product());
    let mut fresh = 0;
    for x in 0..w {
        for y in 0..h {
            for i in 0..cin {
                for o in 0..cout {
                    if i < shared_in && o < shared_out {
                        values.push(old.get(x, y, i, o));
                    } else {
                        values.push(sampler.draw());
                        fresh += 1;
                    }
                }
            }
        }
    }
    Ok(Shared {
        value: ParamMatrix {
            shape: new_shape,
            values,
        },
        fresh_elements: fresh,
    })
}

/// The kernels of one block, one per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub layers: Vec<ParamMatrix>,
}

/// Depth-level sharing: layers `0..min(l_u, l_w)` are width-shared from the
/// stored block; any further layers are drawn from `init`.
pub fn share_depth(new_block: &[[usize; 4]], old: &BlockWeights, init: &WeightInitSpec) -> Result<Shared<BlockWeights>> {
    if new_block.is_empty() {
        return Err(Error::Shape("a block needs at least one layer".into()));
    }
    let mut layers = Vec::with_capacity(new_block.len());
    let mut fresh = 0;
    for (i, &shape) in new_block.iter().enumerate() {
        let layer_init = init.for_layer(i);
        match old.layers.get(i) {
            Some(src) => {
                let s = share_width(shape, src, &layer_init)?;
                fresh += s.fresh_elements;
                layers.push(s.value);
            }
            None => {
                let m = ParamMatrix::random(shape, &layer_init);
                fresh += m.len();
                layers.push(m);
            }
        }
    }
    Ok(Shared {
        value: BlockWeights { layers },
        fresh_elements: fresh,
    })
}

/// Convolution stage within a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorPart {
    /// MBConv pointwise expansion.
    Expand,
    Depthwise,
    /// SepConv pointwise convolution.
    Pointwise,
    /// MBConv pointwise projection.
    Project,
}

impl TensorPart {
    const ALL: [TensorPart; 4] = [
        TensorPart::Expand,
        TensorPart::Depthwise,
        TensorPart::Pointwise,
        TensorPart::Project,
    ];
}

/// Key of a stored kernel. Sharing requires equal `(block, layer, op, kernel, part)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerSignature {
    pub block_index: usize,
    pub layer_index: usize,
    pub op: ConvOp,
    pub kernel: Kernel,
    pub part: TensorPart,
}

/// Signatures and kernel shapes of every block layer of `arch`.
pub fn layer_tensors(arch: &ArchCode, space: &SearchSpaceConfig) -> Vec<(LayerSignature, [usize; 4])> {
    let plan = resolve_channel_plan(arch, space);
    let mut out = Vec::new();
    for (bi, li, block, layer) in plan.layers() {
        let op = block.code.conv;
        let kernel = block.code.kernel;
        let k = kernel.size() as usize;
        let cin = layer.in_channels as usize;
        let cout = layer.out_channels as usize;
        let sig = |part| LayerSignature {
            block_index: bi,
            layer_index: li,
            op,
            kernel,
            part,
        };
        match op {
            ConvOp::SepConv => {
                out.push((sig(TensorPart::Depthwise), [k, k, 1, cin]));
                out.push((sig(TensorPart::Pointwise), [1, 1, cin, cout]));
            }
            ConvOp::MBConv3 | ConvOp::MBConv6 => {
                let hidden = op.expansion() as usize * cin;
                out.push((sig(TensorPart::Expand), [1, 1, cin, hidden]));
                out.push((sig(TensorPart::Depthwise), [k, k, 1, hidden]));
                out.push((sig(TensorPart::Project), [1, 1, hidden, cout]));
            }
        }
    }
    out
}

/// Latest-wins store of committed kernels.
#[derive(Debug, Default)]
pub struct WeightStore {
    entries: RwLock<BTreeMap<LayerSignature, Arc<ParamMatrix>>>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn commit(&self, sig: LayerSignature, matrix: ParamMatrix) {
        self.entries.write().unwrap().insert(sig, Arc::new(matrix));
    }

    pub fn lookup(&self, sig: &LayerSignature) -> Option<Arc<ParamMatrix>> {
        self.entries.read().unwrap().get(sig).cloned()
    }

    /// Consistent copy of the current entries.
    pub fn snapshot(&self) -> BTreeMap<LayerSignature, Arc<ParamMatrix>> {
        self.entries.read().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.entries.write().unwrap().clear();
    }

    pub fn commit_all(&self, weights: BTreeMap<LayerSignature, ParamMatrix>) {
        let mut entries = self.entries.write().unwrap();
        for (sig, m) in weights {
            entries.insert(sig, Arc::new(m));
        }
    }

    /// Writes the binary dump:
    ///
    /// ```text
    /// magic  b"EATW"
    /// u32    format version (1)
    /// u32    entry count N
    /// N x    u32 block, u32 layer, u8 op, u8 kernel, u8 part, u8 0, 4 x u32 shape
    /// N x    shape-product f32 values, in header order
    /// ```
    ///
    /// All integers and floats little-endian; `op` and `part` are enum
    /// ordinals, `kernel` the side length.
    pub fn dump<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let snapshot = self.snapshot();
        out.write_all(DUMP_MAGIC)?;
        out.write_all(&DUMP_VERSION.to_le_bytes())?;
        out.write_all(&(snapshot.len() as u32).to_le_bytes())?;
        for (sig, m) in &snapshot {
            out.write_all(&(sig.block_index as u32).to_le_bytes())?;
            out.write_all(&(sig.layer_index as u32).to_le_bytes())?;
            out.write_all(&[sig.op as u8, sig.kernel.size() as u8, sig.part as u8, 0])?;
            for d in m.shape {
                out.write_all(&(d as u32).to_le_bytes())?;
            }
        }
        for m in snapshot.values() {
            for v in &m.values {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()
    }

    /// Reads a dump written by [`WeightStore::dump`].
    pub fn load<R: Read>(mut input: R) -> Result<Self> {
        let bad = |what: &str| Error::Decode(format!("weight dump: {what}"));
        let mut buf = Vec::new();
        input
            .read_to_end(&mut buf)
            .map_err(|e| Error::Decode(format!("weight dump: {e}")))?;
        let mut cur = Cursor { buf: &buf, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated"))? != DUMP_MAGIC {
            return Err(bad("bad magic"));
        }
        if cur.u32().ok_or_else(|| bad("truncated"))? != DUMP_VERSION {
            return Err(bad("unsupported version"));
        }
        let n = cur.u32().ok_or_else(|| bad("truncated"))? as usize;
        let mut headers = Vec::with_capacity(n);
        for _ in 0..n {
            let block = cur.u32().ok_or_else(|| bad("truncated"))? as usize;
            let layer = cur.u32().ok_or_else(|| bad("truncated"))? as usize;
            let tags = cur.take(4).ok_or_else(|| bad("truncated"))?;
            let op = *ConvOp::ALL.get(tags[0] as usize).ok_or_else(|| bad("unknown op"))?;
            let kernel = Kernel::from_size(tags[1] as u64).ok_or_else(|| bad("unknown kernel"))?;
            let part = *TensorPart::ALL.get(tags[2] as usize).ok_or_else(|| bad("unknown part"))?;
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = cur.u32().ok_or_else(|| bad("truncated"))? as usize;
            }
            let sig = LayerSignature {
                block_index: block,
                layer_index: layer,
                op,
                kernel,
                part,
            };
            headers.push((sig, shape));
        }
        let store = WeightStore::new();
        for (sig, shape) in headers {
            let count: usize = shape.iter().product();
            let raw = cur.take(4 * count).ok_or_else(|| bad("truncated values"))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.commit(sig, ParamMatrix::new(shape, values)?);
        }
        if cur.pos != buf.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(store)
    }
}

const DUMP_MAGIC: &[u8; 4] = b"EATW";
const DUMP_VERSION: u32 = 1;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Weights derived for a child architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedWeights {
    pub weights: BTreeMap<LayerSignature, ParamMatrix>,
    pub inherited_elements: usize,
    pub fresh_elements: usize,
}

/// Initializes every kernel of `child`, inheriting from `store` wherever a
/// kernel with the same signature exists.
///
/// Layers past the depth of whatever was stored have no matching entry and
/// are drawn fresh, which is the depth-sharing rule applied per layer.
pub fn derive_weights(
    child: &ArchCode,
    space: &SearchSpaceConfig,
    store: &WeightStore,
    init: &WeightInitSpec,
) -> Result<DerivedWeights> {
    let snapshot = store.snapshot();
    let mut weights = BTreeMap::new();
    let mut inherited = 0;
    let mut fresh = 0;
    for (sig, shape) in layer_tensors(child, space) {
        let tensor_init = init.for_signature(&sig);
        let m = match snapshot.get(&sig) {
            Some(parent) => {
                let s = share_width(shape, parent, &tensor_init)?;
                fresh += s.fresh_elements;
                inherited += s.value.len() - s.fresh_elements;
                s.value
            }
            None => {
                let m = ParamMatrix::random(shape, &tensor_init);
                fresh += m.len();
                m
            }
        };
        weights.insert(sig, m);
    }
    Ok(DerivedWeights {
        weights,
        inherited_elements: inherited,
        fresh_elements: fresh,
    })
}
