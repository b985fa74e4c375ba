//! The eight candidate operations that can sit on a cell edge.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{ConvGeom, Mode, PoolKind, Tape, Var};
use crate::error::{arg_err, dim_err, Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore, StatsId};
use crate::tensor::{Shape, Tensor};

/// Candidate operation, in canonical index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Zero,
    SkipConnect,
    MaxPool3x3,
    AvgPool3x3,
    SepConv3x3,
    SepConv5x5,
    DilConv3x3,
    DilConv5x5,
}

pub const NUM_OPS: usize = 8;

impl OpKind {
    pub const ALL: [OpKind; NUM_OPS] = [
        OpKind::Zero,
        OpKind::SkipConnect,
        OpKind::MaxPool3x3,
        OpKind::AvgPool3x3,
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::DilConv3x3,
        OpKind::DilConv5x5,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<OpKind> {
        OpKind::ALL.get(i).copied()
    }

    /// Canonical lowercase name used in genotype files.
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Zero => "zero",
            OpKind::SkipConnect => "skip_connect",
            OpKind::MaxPool3x3 => "maxpool_3x3",
            OpKind::AvgPool3x3 => "avgpool_3x3",
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::DilConv5x5 => "dil_conv_5x5",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| arg_err!("unknown op name `{s}`"))
    }
}

impl Serialize for OpKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for OpKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        OpKind::from_str(&s).map_err(|_| serde::de::Error::custom(format!("unknown op name `{s}`")))
    }
}

/// Batch norm with optional per-channel affine parameters.
#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub stats: StatsId,
    pub scale: Option<ParamId>,
    pub shift: Option<ParamId>,
}

impl BatchNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, affine: bool) -> Self {
        let stats = store.add_stats(name, channels);
        let (scale, shift) = if affine {
            (
                Some(store.add(
                    format!("{name}.scale"),
                    ParamGroup::Weight,
                    Tensor::full(Shape::new(1, channels, 1, 1), 1.0),
                )),
                Some(store.add(
                    format!("{name}.shift"),
                    ParamGroup::Weight,
                    Tensor::zeros(Shape::new(1, channels, 1, 1)),
                )),
            )
        } else {
            (None, None)
        };
        BatchNormLayer {
            stats,
            scale,
            shift,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, mode: Mode) -> Result<Var> {
        let scale = self.scale.map(|p| tape.param(p));
        let shift = self.shift.map(|p| tape.param(p));
        tape.batch_norm(x, scale, shift, self.stats, mode)
    }
}

/// Kaiming-normal convolution weight.
pub(crate) fn conv_weight<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: String,
    shape: Shape,
    rng: &mut R,
) -> ParamId {
    let [_, cin_g, kh, kw] = shape.dims();
    let std = (2.0 / (cin_g * kh * kw) as f64).sqrt();
    store.add(name, ParamGroup::Weight, Tensor::randn(shape, std, rng))
}

/// relu → depthwise k×k → pointwise 1×1 → BN.
#[derive(Clone, Debug)]
pub struct SepUnit {
    pub depthwise: ParamId,
    pub pointwise: ParamId,
    pub geom: ConvGeom,
    pub bn: BatchNormLayer,
}

impl SepUnit {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        affine: bool,
        rng: &mut R,
    ) -> Self {
        let padding = dilation * (kernel - 1) / 2;
        let depthwise = conv_weight(
            store,
            format!("{name}.dw"),
            Shape::new(channels, 1, kernel, kernel),
            rng,
        );
        let pointwise = conv_weight(
            store,
            format!("{name}.pw"),
            Shape::new(channels, channels, 1, 1),
            rng,
        );
        SepUnit {
            depthwise,
            pointwise,
            geom: ConvGeom::new(stride, padding, dilation, channels),
            bn: BatchNormLayer::new(store, &format!("{name}.bn"), channels, affine),
        }
    }

    fn forward(&self, tape: &mut Tape<'_>, x: Var, mode: Mode) -> Result<Var> {
        let h = tape.relu(x);
        let dw = tape.param(self.depthwise);
        let h = tape.conv2d(h, dw, self.geom)?;
        let pw = tape.param(self.pointwise);
        let h = tape.conv2d(h, pw, ConvGeom::new(1, 0, 1, 1))?;
        self.bn.forward(tape, h, mode)
    }
}

/// relu → 1×1 conv → BN, mapping `c_in` to `c_out` channels.
#[derive(Clone, Debug)]
pub struct ReluConvBn {
    pub conv: ParamId,
    pub bn: BatchNormLayer,
}

impl ReluConvBn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        affine: bool,
        rng: &mut R,
    ) -> Self {
        ReluConvBn {
            conv: conv_weight(store, format!("{name}.conv"), Shape::new(c_out, c_in, 1, 1), rng),
            bn: BatchNormLayer::new(store, &format!("{name}.bn"), c_out, affine),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, mode: Mode) -> Result<Var> {
        let h = tape.relu(x);
        let w = tape.param(self.conv);
        let h = tape.conv2d(h, w, ConvGeom::new(1, 0, 1, 1))?;
        self.bn.forward(tape, h, mode)
    }

    pub fn param_count(c_in: usize, c_out: usize, affine: bool) -> usize {
        c_in * c_out + bn_params(c_out, affine)
    }
}

/// Two parallel 1×1 stride-2 convolutions, the second on the input shifted by one
/// pixel, concatenated along channels and batch-normalised.
#[derive(Clone, Debug)]
pub struct FactorizedReduce {
    pub conv_a: ParamId,
    pub conv_b: ParamId,
    pub bn: BatchNormLayer,
}

impl FactorizedReduce {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        affine: bool,
        rng: &mut R,
    ) -> Self {
        let half = c_out / 2;
        FactorizedReduce {
            conv_a: conv_weight(store, format!("{name}.conv_a"), Shape::new(half, c_in, 1, 1), rng),
            conv_b: conv_weight(
                store,
                format!("{name}.conv_b"),
                Shape::new(c_out - half, c_in, 1, 1),
                rng,
            ),
            bn: BatchNormLayer::new(store, &format!("{name}.bn"), c_out, affine),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, mode: Mode) -> Result<Var> {
        let geom = ConvGeom::new(2, 0, 1, 1);
        let wa = tape.param(self.conv_a);
        let a = tape.conv2d(x, wa, geom)?;
        let shifted = tape.shift(x);
        let wb = tape.param(self.conv_b);
        let b = tape.conv2d(shifted, wb, geom)?;
        let h = tape.concat_channels(&[a, b])?;
        self.bn.forward(tape, h, mode)
    }

    pub fn param_count(c_in: usize, c_out: usize, affine: bool) -> usize {
        c_in * c_out + bn_params(c_out, affine)
    }
}

fn bn_params(channels: usize, affine: bool) -> usize {
    if affine {
        2 * channels
    } else {
        0
    }
}

#[derive(Clone, Debug)]
enum Block {
    Empty,
    Reduce(FactorizedReduce),
    Pool(PoolKind, BatchNormLayer),
    Sep([SepUnit; 2]),
    Dil(SepUnit),
}

/// One candidate operation with its own parameters.
#[derive(Clone, Debug)]
pub struct OpInstance {
    pub kind: OpKind,
    pub channels: usize,
    pub stride: usize,
    pub affine: bool,
    block: Block,
}

impl OpInstance {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kind: OpKind,
        channels: usize,
        stride: usize,
        affine: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(arg_err!("op {name} needs at least one channel"));
        }
        if stride != 1 && stride != 2 {
            return Err(arg_err!("op stride must be 1 or 2, got {stride}"));
        }
        let c = channels;
        let block = match kind {
            OpKind::Zero => Block::Empty,
            OpKind::SkipConnect if stride == 1 => Block::Empty,
            OpKind::SkipConnect => Block::Reduce(FactorizedReduce::new(store, name, c, c, affine, rng)),
            OpKind::MaxPool3x3 | OpKind::AvgPool3x3 => {
                let pk = if kind == OpKind::MaxPool3x3 {
                    PoolKind::Max
                } else {
                    PoolKind::Avg
                };
                Block::Pool(pk, BatchNormLayer::new(store, &format!("{name}.bn"), c, affine))
            }
            OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
                let k = if kind == OpKind::SepConv3x3 { 3 } else { 5 };
                Block::Sep([
                    SepUnit::new(store, &format!("{name}.u0"), c, k, stride, 1, affine, rng),
                    SepUnit::new(store, &format!("{name}.u1"), c, k, 1, 1, affine, rng),
                ])
            }
            OpKind::DilConv3x3 | OpKind::DilConv5x5 => {
                let k = if kind == OpKind::DilConv3x3 { 3 } else { 5 };
                Block::Dil(SepUnit::new(store, name, c, k, stride, 2, affine, rng))
            }
        };
        Ok(OpInstance {
            kind,
            channels,
            stride,
            affine,
            block,
        })
    }

    /// Apply the operation. Stride-1 skip returns `x` itself.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, mode: Mode) -> Result<Var> {
        let c = tape.shape(x).c();
        if c != self.channels {
            return Err(dim_err!(
                "{} expects {} channels, input has {c}",
                self.kind,
                self.channels
            ));
        }
        match &self.block {
            Block::Empty if self.kind == OpKind::Zero => tape.zero(x, self.stride),
            Block::Empty => Ok(x),
            Block::Reduce(fr) => fr.forward(tape, x, mode),
            Block::Pool(kind, bn) => {
                let h = tape.pool2d(x, *kind, self.stride)?;
                bn.forward(tape, h, mode)
            }
            Block::Sep([a, b]) => {
                let h = a.forward(tape, x, mode)?;
                b.forward(tape, h, mode)
            }
            Block::Dil(u) => u.forward(tape, x, mode),
        }
    }

    /// Whether the operation does real work worth recomputing rather than storing.
    pub fn is_trivial(&self) -> bool {
        matches!(self.block, Block::Empty)
    }

    /// Every parameter this instance owns.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let bn_ids = |bn: &BatchNormLayer| bn.scale.into_iter().chain(bn.shift).collect::<Vec<_>>();
        let unit_ids = |u: &SepUnit| {
            let mut v = vec![u.depthwise, u.pointwise];
            v.extend(bn_ids(&u.bn));
            v
        };
        match &self.block {
            Block::Empty => vec![],
            Block::Reduce(fr) => {
                let mut v = vec![fr.conv_a, fr.conv_b];
                v.extend(bn_ids(&fr.bn));
                v
            }
            Block::Pool(_, bn) => bn_ids(bn),
            Block::Sep([a, b]) => {
                let mut v = unit_ids(a);
                v.extend(unit_ids(b));
                v
            }
            Block::Dil(u) => unit_ids(u),
        }
    }
}

/// Trainable scalars of a stride-1 operation on `channels` channels.
pub fn op_param_count(kind: OpKind, channels: usize, affine: bool) -> usize {
    op_param_count_strided(kind, channels, 1, affine)
}

/// Trainable scalars of an operation, including the strided skip's factorized reduce.
pub fn op_param_count_strided(kind: OpKind, channels: usize, stride: usize, affine: bool) -> usize {
    let c = channels;
    let unit = |k: usize| k * k * c + c * c + bn_params(c, affine);
    match kind {
        OpKind::Zero => 0,
        OpKind::SkipConnect if stride == 1 => 0,
        OpKind::SkipConnect => FactorizedReduce::param_count(c, c, affine),
        OpKind::MaxPool3x3 | OpKind::AvgPool3x3 => bn_params(c, affine),
        OpKind::SepConv3x3 => 2 * unit(3),
        OpKind::SepConv5x5 => 2 * unit(5),
        OpKind::DilConv3x3 => unit(3),
        OpKind::DilConv5x5 => unit(5),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn names_round_trip_in_canonical_order() {
        for (i, k) in OpKind::ALL.iter().enumerate() {
            assert_eq!(k.index(), i);
            assert_eq!(k.name().parse::<OpKind>().unwrap(), *k);
        }
        assert!("conv_7x7".parse::<OpKind>().is_err());
    }

    #[test]
    fn hand_counted_parameters() {
        assert_eq!(op_param_count(OpKind::Zero, 16, true), 0);
        assert_eq!(op_param_count(OpKind::SepConv3x3, 16, false), 800);
        assert_eq!(op_param_count(OpKind::DilConv5x5, 16, false), 656);
        assert_eq!(op_param_count(OpKind::MaxPool3x3, 16, true), 32);
    }

    #[test]
    fn allocated_scalars_match_count() {
        for kind in OpKind::ALL {
            for c in [8, 16, 64] {
                for affine in [false, true] {
                    for stride in [1, 2] {
                        let mut store = ParamStore::new();
                        let op = OpInstance::new(&mut store, "op", kind, c, stride, affine, &mut rng()).unwrap();
                        let allocated: usize = op.param_ids().iter().map(|&id| store.value(id).numel()).sum();
                        assert_eq!(store.count(ParamGroup::Weight), allocated);
                        assert_eq!(
                            allocated,
                            op_param_count_strided(kind, c, stride, affine),
                            "{kind} C={c} stride={stride} affine={affine}"
                        );
                        if stride == 1 {
                            assert_eq!(allocated, op_param_count(kind, c, affine));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_op_has_strided_shape() {
        let mut store = ParamStore::new();
        let op = OpInstance::new(&mut store, "z", OpKind::Zero, 16, 2, false, &mut rng()).unwrap();
        let mut tape = Tape::new(&store, crate::autodiff::GradMode::ALL);
        let x = tape.leaf(Tensor::randn(Shape::new(2, 16, 12, 12), 1.0, &mut rng()), true);
        let y = op.forward(&mut tape, x, Mode::Train).unwrap();
        assert_eq!(tape.shape(y), Shape::new(2, 16, 6, 6));
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shapes_for_every_kind() {
        for kind in OpKind::ALL {
            for stride in [1, 2] {
                for hw in [6, 7, 8, 12] {
                    let mut store = ParamStore::new();
                    let op = OpInstance::new(&mut store, "op", kind, 4, stride, false, &mut rng()).unwrap();
                    let mut tape = Tape::new(&store, crate::autodiff::GradMode::NONE);
                    let x = tape.leaf(Tensor::randn(Shape::new(2, 4, hw, hw + 1), 1.0, &mut rng()), false);
                    let y = op.forward(&mut tape, x, Mode::Train).unwrap();
                    let expect = Shape::new(2, 4, hw.div_ceil(stride), (hw + 1).div_ceil(stride));
                    assert_eq!(tape.shape(y), expect, "{kind} stride {stride} on {hw}");
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let mut store = ParamStore::new();
        let op = OpInstance::new(&mut store, "op", OpKind::SepConv3x3, 8, 1, false, &mut rng()).unwrap();
        let mut tape = Tape::new(&store, crate::autodiff::GradMode::NONE);
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 4, 6, 6)), false);
        assert!(matches!(op.forward(&mut tape, x, Mode::Train), Err(Error::Dimension(_))));
    }

    #[test]
    fn parameterized_kinds_pass_gradient_check() {
        for kind in OpKind::ALL {
            for stride in [1, 2] {
                let mut store = ParamStore::new();
                let op = OpInstance::new(&mut store, "op", kind, 4, stride, true, &mut rng()).unwrap();
                let x = Tensor::randn(Shape::new(2, 4, 7, 6), 1.0, &mut rng());
                let report = grad_check(
                    &store,
                    |t, v| op.forward(t, v[0], Mode::Train),
                    &[x],
                    &GradCheckOptions::default(),
                )
                .unwrap();
                assert!(report.pass, "{kind} stride {stride}: {report:?}");
            }
        }
    }
}
