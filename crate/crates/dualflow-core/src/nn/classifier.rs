//! Source and victim classifiers: a plain MLP and a small strided ConvNet.

use std::collections::BTreeMap;

use super::linear::LinearLayer;
use super::Act;
use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::{Binding, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierArch {
    Mlp,
    SmallConv,
}

impl ClassifierArch {
    pub fn name(self) -> &'static str {
        match self {
            ClassifierArch::Mlp => "mlp",
            ClassifierArch::SmallConv => "small-conv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ClassifierArch::Mlp),
            "small-conv" => Ok(ClassifierArch::SmallConv),
            other => Err(CoreError::InvalidArgument(format!("unknown architecture '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierCfg {
    pub arch: ClassifierArch,
    /// flattened input dimension; for small-conv this must equal h * w
    pub input_dim: usize,
    /// image height/width for the conv path (square, single channel)
    pub image_side: usize,
    pub classes: usize,
    pub activation: Act,
}

impl ClassifierCfg {
    pub fn mlp(input_dim: usize, classes: usize) -> Self {
        ClassifierCfg { arch: ClassifierArch::Mlp, input_dim, image_side: 0, classes, activation: Act::Relu }
    }

    pub fn small_conv(image_side: usize, classes: usize) -> Self {
        ClassifierCfg {
            arch: ClassifierArch::SmallConv,
            input_dim: image_side * image_side,
            image_side,
            classes,
            activation: Act::Relu,
        }
    }

    pub fn smooth(mut self) -> Self {
        self.activation = Act::Tanh;
        self
    }
}

/// Classifier descriptor; parameters live under the `cls.` prefix.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub cfg: ClassifierCfg,
    dense: Vec<LinearLayer>,
    conv_channels: (usize, usize),
    conv_kernel: usize,
    conv_stride: usize,
}

const MLP_HIDDEN: [usize; 2] = [128, 64];
const CONV_CH: (usize, usize) = (8, 16);
const CONV_K: usize = 3;
const CONV_S: usize = 2;

fn conv_out(side: usize, k: usize, s: usize) -> usize {
    (side - k) / s + 1
}

impl Classifier {
    pub fn init(store: &mut ParamStore, cfg: ClassifierCfg, rng: &mut Rng) -> Result<Self> {
        if cfg.classes < 2 {
            return Err(CoreError::InvalidArgument("classifier needs >= 2 classes".into()));
        }
        let mut dense = Vec::new();
        match cfg.arch {
            ClassifierArch::Mlp => {
                let mut d = cfg.input_dim;
                for (i, &h) in MLP_HIDDEN.iter().enumerate() {
                    dense.push(LinearLayer::init(store, &format!("cls.fc{i}"), d, h, true, rng)?);
                    d = h;
                }
                dense.push(LinearLayer::init(store, "cls.head", d, cfg.classes, true, rng)?);
            }
            ClassifierArch::SmallConv => {
                if cfg.image_side * cfg.image_side != cfg.input_dim {
                    return Err(CoreError::Shape(format!(
                        "small-conv: input_dim {} vs side {}",
                        cfg.input_dim, cfg.image_side
                    )));
                }
                let (c1, c2) = CONV_CH;
                let std1 = 1.0 / ((CONV_K * CONV_K) as f32).sqrt();
                let std2 = 1.0 / ((c1 * CONV_K * CONV_K) as f32).sqrt();
                store.insert(
                    "cls.conv1.w",
                    Tensor::new(vec![c1, 1, CONV_K, CONV_K], rng.normal_vec(c1 * CONV_K * CONV_K, std1))?,
                    true,
                )?;
                store.insert("cls.conv1.b", Tensor::zeros(vec![c1]), true)?;
                store.insert(
                    "cls.conv2.w",
                    Tensor::new(
                        vec![c2, c1, CONV_K, CONV_K],
                        rng.normal_vec(c2 * c1 * CONV_K * CONV_K, std2),
                    )?,
                    true,
                )?;
                store.insert("cls.conv2.b", Tensor::zeros(vec![c2]), true)?;
                let s1 = conv_out(cfg.image_side, CONV_K, CONV_S);
                let s2 = conv_out(s1, CONV_K, CONV_S);
                let flat = c2 * s2 * s2;
                dense.push(LinearLayer::init(store, "cls.fc0", flat, 64, true, rng)?);
                dense.push(LinearLayer::init(store, "cls.head", 64, cfg.classes, true, rng)?);
            }
        }
        Ok(Classifier { cfg, dense, conv_channels: CONV_CH, conv_kernel: CONV_K, conv_stride: CONV_S })
    }

    /// Logits for a [B, input_dim] batch on an existing tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        store: &ParamStore,
        x: Var,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.input_dim {
            return Err(CoreError::Shape(format!(
                "classifier forward: x {shape:?}, expected [B, {}]",
                self.cfg.input_dim
            )));
        }
        let batch = shape[0];
        let act = self.cfg.activation;
        let mut z = x;
        if self.cfg.arch == ClassifierArch::SmallConv {
            let side = self.cfg.image_side;
            let (c1, c2) = self.conv_channels;
            z = tape.reshape(z, vec![batch, 1, side, side])?;
            let w1 = bind.bind(tape, store, "cls.conv1.w")?;
            let b1 = bind.bind(tape, store, "cls.conv1.b")?;
            z = tape.conv2d(z, w1, b1, self.conv_stride)?;
            z = act.apply(tape, z)?;
            let w2 = bind.bind(tape, store, "cls.conv2.w")?;
            let b2 = bind.bind(tape, store, "cls.conv2.b")?;
            z = tape.conv2d(z, w2, b2, self.conv_stride)?;
            z = act.apply(tape, z)?;
            let s1 = conv_out(side, self.conv_kernel, self.conv_stride);
            let s2 = conv_out(s1, self.conv_kernel, self.conv_stride);
            z = tape.reshape(z, vec![batch, c2 * s2 * s2])?;
            let _ = c1;
        }
        let last = self.dense.len() - 1;
        for (i, layer) in self.dense.iter().enumerate() {
            z = layer.forward(tape, bind, store, z, None, false)?;
            if i != last {
                z = act.apply(tape, z)?;
            }
        }
        Ok(z)
    }

    /// Gradient-free logits from a tensor batch.
    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut bind = Binding::new();
        for name in self.param_names() {
            bind.bind_frozen(&mut tape, store, &name)?;
        }
        let xv = tape.constant(x);
        let logits = self.forward(&mut tape, &mut bind, store, xv)?;
        Ok(tape.value(logits))
    }

    /// Argmax class per row.
    pub fn predict(&self, store: &ParamStore, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.eval(store, x)?;
        let k = self.cfg.classes;
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect())
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.cfg.arch == ClassifierArch::SmallConv {
            names.extend(
                ["cls.conv1.w", "cls.conv1.b", "cls.conv2.w", "cls.conv2.b"]
                    .map(String::from),
            );
        }
        for layer in &self.dense {
            names.push(layer.weight_name());
            names.push(layer.bias_name());
        }
        names
    }

    pub fn is_smooth(&self) -> bool {
        self.cfg.activation.is_smooth()
    }

    pub fn meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("model".into(), "classifier".into());
        m.insert("arch".into(), self.cfg.arch.name().into());
        m.insert("input_dim".into(), self.cfg.input_dim.to_string());
        m.insert("image_side".into(), self.cfg.image_side.to_string());
        m.insert("classes".into(), self.cfg.classes.to_string());
        m.insert("activation".into(), self.cfg.activation.name().into());
        m
    }

    pub fn from_meta(meta: &BTreeMap<String, String>, store: &ParamStore) -> Result<Self> {
        let get = |k: &str| -> Result<&String> {
            meta.get(k)
                .ok_or_else(|| CoreError::Format(format!("checkpoint meta missing '{k}'")))
        };
        let cfg = ClassifierCfg {
            arch: ClassifierArch::parse(get("arch")?)?,
            input_dim: get("input_dim")?
                .parse()
                .map_err(|_| CoreError::Format("bad input_dim".into()))?,
            image_side: get("image_side")?
                .parse()
                .map_err(|_| CoreError::Format("bad image_side".into()))?,
            classes: get("classes")?.parse().map_err(|_| CoreError::Format("bad classes".into()))?,
            activation: Act::parse(get("activation")?)?,
        };
        let clf = Classifier::describe(cfg);
        for name in clf.param_names() {
            if !store.contains(&name) {
                return Err(CoreError::Format(format!("checkpoint missing parameter '{name}'")));
            }
        }
        Ok(clf)
    }

    fn describe(cfg: ClassifierCfg) -> Self {
        let mut dense = Vec::new();
        match cfg.arch {
            ClassifierArch::Mlp => {
                let mut d = cfg.input_dim;
                for (i, &h) in MLP_HIDDEN.iter().enumerate() {
                    dense.push(LinearLayer::describe(&format!("cls.fc{i}"), d, h, true));
                    d = h;
                }
                dense.push(LinearLayer::describe("cls.head", d, cfg.classes, true));
            }
            ClassifierArch::SmallConv => {
                let (_, c2) = CONV_CH;
                let s1 = conv_out(cfg.image_side, CONV_K, CONV_S);
                let s2 = conv_out(s1, CONV_K, CONV_S);
                dense.push(LinearLayer::describe("cls.fc0", c2 * s2 * s2, 64, true));
                dense.push(LinearLayer::describe("cls.head", 64, cfg.classes, true));
            }
        }
        Classifier { cfg, dense, conv_channels: CONV_CH, conv_kernel: CONV_K, conv_stride: CONV_S }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logits_length_and_determinism() {
        let mut rng = Rng::seed_from(31);
        for arch in [ClassifierArch::Mlp, ClassifierArch::SmallConv] {
            let mut store = ParamStore::new();
            let cfg = match arch {
                ClassifierArch::Mlp => ClassifierCfg::mlp(64, 5),
                ClassifierArch::SmallConv => ClassifierCfg::small_conv(8, 5),
            };
            let clf = Classifier::init(&mut store, cfg, &mut rng).unwrap();
            let x = Tensor::new(vec![2, 64], rng.normal_vec(128, 1.0)).unwrap();
            let a = clf.eval(&store, &x).unwrap();
            let b = clf.eval(&store, &x).unwrap();
            assert_eq!(a.shape(), &[2, 5]);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_head_gives_uniform_logits_and_ce_ln_l() {
        let mut rng = Rng::seed_from(32);
        let mut store = ParamStore::new();
        let clf = Classifier::init(&mut store, ClassifierCfg::mlp(10, 4), &mut rng).unwrap();
        // zero out the final layer -> logits all zero -> CE = ln 4
        store.set("cls.head.w", Tensor::zeros(vec![4, 64])).unwrap();
        store.set("cls.head.b", Tensor::zeros(vec![4])).unwrap();
        let x = Tensor::new(vec![1, 10], rng.normal_vec(10, 1.0)).unwrap();
        let logits = clf.eval(&store, &x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));

        let mut tape = Tape::new();
        let lv = tape.constant(&logits);
        let loss = tape.softmax_cross_entropy(lv, &[2]).unwrap();
        assert!((tape.scalar(loss).unwrap() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn wrong_input_dim_rejected() {
        let mut rng = Rng::seed_from(33);
        let mut store = ParamStore::new();
        let clf = Classifier::init(&mut store, ClassifierCfg::mlp(10, 3), &mut rng).unwrap();
        let x = Tensor::new(vec![1, 9], vec![0.0; 9]).unwrap();
        assert!(clf.eval(&store, &x).is_err());
    }

    #[test]
    fn smooth_variant_reports_smooth() {
        let mut rng = Rng::seed_from(34);
        let mut store = ParamStore::new();
        let clf =
            Classifier::init(&mut store, ClassifierCfg::mlp(10, 3).smooth(), &mut rng).unwrap();
        assert!(clf.is_smooth());
    }
}
