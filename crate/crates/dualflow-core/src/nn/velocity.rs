//! Conditional velocity field v(x, t, c).
//!
//! Structure: input projection + sinusoidal time embedding, then H blocks of
//! (dense, smooth activation, cross-attention over the condition rows), then
//! an output projection back to the input shape. Every dense layer can carry
//! a LoRA adapter; with adapters disabled (or B = 0) the field is the frozen
//! base v_phi, with them enabled it is the adapted v_theta.

use std::collections::BTreeMap;

use super::embedding::{BatchCond, ClassEmbeddingTable};
use super::linear::{LinearLayer, LoRAAdapter};
use super::Act;
use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::{Binding, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct VelocityModelCfg {
    pub input_dim: usize,
    pub width: usize,
    pub blocks: usize,
    /// sinusoidal time-embedding width
    pub d_t: usize,
    /// class-embedding width
    pub d_e: usize,
    /// attention head width
    pub d_attn: usize,
    pub num_classes: usize,
    pub activation: Act,
}

impl VelocityModelCfg {
    /// Desk-scale defaults for flattened images.
    pub fn for_images(input_dim: usize, num_classes: usize) -> Self {
        VelocityModelCfg {
            input_dim,
            width: 128,
            blocks: 3,
            d_t: 32,
            d_e: 32,
            d_attn: 128,
            num_classes,
            activation: Act::Silu,
        }
    }

    /// Narrower net for 2-D point data.
    pub fn for_points(num_classes: usize) -> Self {
        VelocityModelCfg {
            input_dim: 2,
            width: 64,
            blocks: 3,
            d_t: 32,
            d_e: 32,
            d_attn: 64,
            num_classes,
            activation: Act::Silu,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VelocityModel {
    pub cfg: VelocityModelCfg,
    input_proj: LinearLayer,
    time_proj: LinearLayer,
    block_dense: Vec<LinearLayer>,
    block_wq: Vec<LinearLayer>,
    block_wk: Vec<LinearLayer>,
    block_wv: Vec<LinearLayer>,
    output_proj: LinearLayer,
    pub embed: ClassEmbeddingTable,
    /// adapter per dense-layer name; empty until attached
    adapters: BTreeMap<String, LoRAAdapter>,
}

impl VelocityModel {
    /// Create all base parameters under the `vel.` prefix.
    pub fn init(store: &mut ParamStore, cfg: VelocityModelCfg, rng: &mut Rng) -> Result<Self> {
        if !cfg.activation.is_smooth() {
            return Err(CoreError::InvalidArgument(
                "velocity field requires a smooth activation".into(),
            ));
        }
        if cfg.d_attn != cfg.width {
            return Err(CoreError::InvalidArgument(
                "attention width must match block width (residual add)".into(),
            ));
        }
        let w = cfg.width;
        let input_proj = LinearLayer::init(store, "vel.in", cfg.input_dim, w, true, rng)?;
        let time_proj = LinearLayer::init(store, "vel.time", cfg.d_t, w, true, rng)?;
        let mut block_dense = Vec::new();
        let mut block_wq = Vec::new();
        let mut block_wk = Vec::new();
        let mut block_wv = Vec::new();
        for i in 0..cfg.blocks {
            block_dense.push(LinearLayer::init(store, &format!("vel.block{i}.dense"), w, w, true, rng)?);
            block_wq.push(LinearLayer::init(store, &format!("vel.block{i}.attn_q"), w, cfg.d_attn, false, rng)?);
            block_wk.push(LinearLayer::init(store, &format!("vel.block{i}.attn_k"), cfg.d_e, cfg.d_attn, false, rng)?);
            block_wv.push(LinearLayer::init(store, &format!("vel.block{i}.attn_v"), cfg.d_e, cfg.d_attn, false, rng)?);
        }
        let output_proj = LinearLayer::init(store, "vel.out", w, cfg.input_dim, true, rng)?;
        let embed = ClassEmbeddingTable::init(store, "vel.emb", cfg.num_classes, cfg.d_e, rng)?;
        Ok(VelocityModel {
            cfg,
            input_proj,
            time_proj,
            block_dense,
            block_wq,
            block_wk,
            block_wv,
            output_proj,
            embed,
            adapters: BTreeMap::new(),
        })
    }

    /// Every dense layer of the model, attention projections included.
    fn dense_layers(&self) -> Vec<&LinearLayer> {
        let mut layers = vec![&self.input_proj, &self.time_proj];
        for i in 0..self.cfg.blocks {
            layers.push(&self.block_dense[i]);
            layers.push(&self.block_wq[i]);
            layers.push(&self.block_wk[i]);
            layers.push(&self.block_wv[i]);
        }
        layers.push(&self.output_proj);
        layers
    }

    /// Attach zero-initialized LoRA adapters to every dense layer. Until the
    /// first optimizer step the adapted field equals the base field exactly.
    pub fn attach_adapters(
        &mut self,
        store: &mut ParamStore,
        rank: usize,
        alpha: f32,
        rng: &mut Rng,
    ) -> Result<()> {
        if !self.adapters.is_empty() {
            return Err(CoreError::InvalidArgument("adapters already attached".into()));
        }
        let mut adapters = BTreeMap::new();
        for layer in self.dense_layers() {
            let rank_eff = rank.min(layer.d_in.min(layer.d_out));
            let ad = LoRAAdapter::init(store, layer, rank_eff, alpha, rng)?;
            adapters.insert(layer.name.clone(), ad);
        }
        self.adapters = adapters;
        Ok(())
    }

    pub fn has_adapters(&self) -> bool {
        !self.adapters.is_empty()
    }

    /// Names of adapter parameters plus the trainable class rows: the set a
    /// cascade-training step is allowed to update.
    pub fn attack_trainable_names(&self, train_class_rows: bool) -> Vec<String> {
        let mut names: Vec<String> = self
            .adapters
            .values()
            .flat_map(|a| [a.a_name(), a.b_name()])
            .collect();
        if train_class_rows {
            names.push(self.embed.classes_name());
        }
        names.sort();
        names
    }

    fn adapter_for<'a>(&'a self, layer: &LinearLayer, use_lora: bool) -> Option<&'a LoRAAdapter> {
        if use_lora {
            self.adapters.get(&layer.name)
        } else {
            None
        }
    }

    /// Sinusoidal embedding of a scalar time in [0, 1].
    pub fn time_embedding(&self, t: f32) -> Tensor {
        let half = self.cfg.d_t / 2;
        let mut data = Vec::with_capacity(self.cfg.d_t);
        for i in 0..half {
            let freq = 1000f64.powf(i as f64 / (half.max(2) - 1) as f64);
            let arg = freq * t as f64;
            data.push(arg.sin() as f32);
            data.push(arg.cos() as f32);
        }
        Tensor::new(vec![self.cfg.d_t], data).expect("sin/cos are finite")
    }

    /// Batched forward on an existing tape. `x`: [B, input_dim], `t` in [0, 1]
    /// shared by the whole batch (integration steps run at one grid time).
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        store: &ParamStore,
        x: Var,
        t: f32,
        cond: BatchCond,
        use_lora: bool,
    ) -> Result<Var> {
        self.forward_impl(tape, bind, store, x, &[t], cond, use_lora)
    }

    /// Forward with one time per batch row (flow-matching pretraining draws
    /// per-sample times).
    #[allow(clippy::too_many_arguments)]
    pub fn forward_per_sample_t(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        store: &ParamStore,
        x: Var,
        times: &[f32],
        cond: BatchCond,
        use_lora: bool,
    ) -> Result<Var> {
        let batch = tape.shape(x).first().copied().unwrap_or(0);
        if times.len() != batch {
            return Err(CoreError::Shape(format!(
                "{} times for batch {batch}",
                times.len()
            )));
        }
        self.forward_impl(tape, bind, store, x, times, cond, use_lora)
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_impl(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        store: &ParamStore,
        x: Var,
        times: &[f32],
        cond: BatchCond,
        use_lora: bool,
    ) -> Result<Var> {
        if let Some(&t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(CoreError::InvalidArgument(format!("time {t} outside [0, 1]")));
        }
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.input_dim {
            return Err(CoreError::Shape(format!(
                "velocity forward: x {shape:?}, expected [B, {}]",
                self.cfg.input_dim
            )));
        }
        let batch = shape[0];
        if use_lora && self.adapters.is_empty() {
            return Err(CoreError::InvalidArgument("use_lora without attached adapters".into()));
        }
        let act = self.cfg.activation;

        // condition rows
        let e = self.embed.lookup(tape, bind, store, cond, batch)?;

        // input projection + time embedding
        let mut z = self.input_proj.forward(
            tape, bind, store, x,
            self.adapter_for(&self.input_proj, use_lora),
            use_lora,
        )?;
        let temb_rows: Vec<Tensor> = times.iter().map(|&t| self.time_embedding(t)).collect();
        let temb = {
            let stacked = Tensor::stack_rows(&temb_rows)?;
            tape.constant(&stacked)
        };
        let trows = self.time_proj.forward(
            tape, bind, store, temb,
            self.adapter_for(&self.time_proj, use_lora),
            use_lora,
        )?;
        if times.len() == 1 {
            let trow = tape.reshape(trows, vec![self.cfg.width])?;
            z = tape.add_row(z, trow)?;
        } else {
            z = tape.add(z, trows)?;
        }
        z = act.apply(tape, z)?;

        for i in 0..self.cfg.blocks {
            let h = self.block_dense[i].forward(
                tape, bind, store, z,
                self.adapter_for(&self.block_dense[i], use_lora),
                use_lora,
            )?;
            let h = act.apply(tape, h)?;
            let wq = self.block_wq[i].effective_weight(
                tape, bind, store,
                self.adapter_for(&self.block_wq[i], use_lora),
                use_lora,
            )?;
            let wk = self.block_wk[i].effective_weight(
                tape, bind, store,
                self.adapter_for(&self.block_wk[i], use_lora),
                use_lora,
            )?;
            let wv = self.block_wv[i].effective_weight(
                tape, bind, store,
                self.adapter_for(&self.block_wv[i], use_lora),
                use_lora,
            )?;
            let attn = tape.cross_attention(h, e, wq, wk, wv)?;
            z = tape.add(h, attn)?;
        }

        self.output_proj.forward(
            tape, bind, store, z,
            self.adapter_for(&self.output_proj, use_lora),
            use_lora,
        )
    }

    /// Gradient-free evaluation from plain tensors.
    pub fn eval(
        &self,
        store: &ParamStore,
        x: &Tensor,
        t: f32,
        cond: BatchCond,
        use_lora: bool,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut bind = Binding::new();
        let xv = tape.constant(x);
        // bind_frozen for every parameter: no gradient bookkeeping
        let out = self.forward_frozen(&mut tape, &mut bind, store, xv, t, cond, use_lora)?;
        Ok(tape.value(out))
    }

    /// Forward with every parameter bound as a constant.
    pub fn forward_frozen(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        store: &ParamStore,
        x: Var,
        t: f32,
        cond: BatchCond,
        use_lora: bool,
    ) -> Result<Var> {
        // rebind names as constants first; Binding caches by name, so the
        // regular forward below picks up the frozen vars
        for name in self.param_names(use_lora) {
            bind.bind_frozen(tape, store, &name)?;
        }
        self.forward(tape, bind, store, x, t, cond, use_lora)
    }

    fn param_names(&self, use_lora: bool) -> Vec<String> {
        let mut names = Vec::new();
        for layer in self.dense_layers() {
            names.push(layer.weight_name());
            if layer.bias {
                names.push(layer.bias_name());
            }
            if use_lora {
                if let Some(ad) = self.adapters.get(&layer.name) {
                    names.push(ad.a_name());
                    names.push(ad.b_name());
                }
            }
        }
        names.push(self.embed.classes_name());
        names.push(self.embed.null_name());
        names
    }

    /// Architecture echo for checkpoints.
    pub fn meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("model".into(), "velocity".into());
        m.insert("input_dim".into(), self.cfg.input_dim.to_string());
        m.insert("width".into(), self.cfg.width.to_string());
        m.insert("blocks".into(), self.cfg.blocks.to_string());
        m.insert("d_t".into(), self.cfg.d_t.to_string());
        m.insert("d_e".into(), self.cfg.d_e.to_string());
        m.insert("d_attn".into(), self.cfg.d_attn.to_string());
        m.insert("num_classes".into(), self.cfg.num_classes.to_string());
        m.insert("activation".into(), self.cfg.activation.name().into());
        if let Some(ad) = self.adapters.values().next() {
            m.insert("lora_rank".into(), ad.rank.to_string());
            m.insert("lora_alpha".into(), ad.alpha.to_string());
        }
        m
    }

    /// Rebuild a descriptor from checkpoint metadata (parameters must already
    /// be present in the store).
    pub fn from_meta(meta: &BTreeMap<String, String>, store: &ParamStore) -> Result<Self> {
        let get = |k: &str| -> Result<&String> {
            meta.get(k)
                .ok_or_else(|| CoreError::Format(format!("checkpoint meta missing '{k}'")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| CoreError::Format(format!("bad meta value for '{k}'")))
        };
        let cfg = VelocityModelCfg {
            input_dim: parse_usize("input_dim")?,
            width: parse_usize("width")?,
            blocks: parse_usize("blocks")?,
            d_t: parse_usize("d_t")?,
            d_e: parse_usize("d_e")?,
            d_attn: parse_usize("d_attn")?,
            num_classes: parse_usize("num_classes")?,
            activation: Act::parse(get("activation")?)?,
        };
        let mut model = VelocityModel::describe(cfg);
        if let Some(rank) = meta.get("lora_rank") {
            let rank: usize =
                rank.parse().map_err(|_| CoreError::Format("bad lora_rank".into()))?;
            let alpha: f32 = meta
                .get("lora_alpha")
                .ok_or_else(|| CoreError::Format("lora_alpha missing".into()))?
                .parse()
                .map_err(|_| CoreError::Format("bad lora_alpha".into()))?;
            model.describe_adapters(rank, alpha);
        }
        for name in model.param_names(model.has_adapters()) {
            if !store.contains(&name) {
                return Err(CoreError::Format(format!("checkpoint missing parameter '{name}'")));
            }
        }
        Ok(model)
    }

    fn describe(cfg: VelocityModelCfg) -> Self {
        let w = cfg.width;
        let input_proj = LinearLayer::describe("vel.in", cfg.input_dim, w, true);
        let time_proj = LinearLayer::describe("vel.time", cfg.d_t, w, true);
        let mut block_dense = Vec::new();
        let mut block_wq = Vec::new();
        let mut block_wk = Vec::new();
        let mut block_wv = Vec::new();
        for i in 0..cfg.blocks {
            block_dense.push(LinearLayer::describe(&format!("vel.block{i}.dense"), w, w, true));
            block_wq.push(LinearLayer::describe(&format!("vel.block{i}.attn_q"), w, cfg.d_attn, false));
            block_wk.push(LinearLayer::describe(&format!("vel.block{i}.attn_k"), cfg.d_e, cfg.d_attn, false));
            block_wv.push(LinearLayer::describe(&format!("vel.block{i}.attn_v"), cfg.d_e, cfg.d_attn, false));
        }
        let output_proj = LinearLayer::describe("vel.out", w, cfg.input_dim, true);
        let embed = ClassEmbeddingTable::describe("vel.emb", cfg.num_classes, cfg.d_e);
        VelocityModel {
            cfg,
            input_proj,
            time_proj,
            block_dense,
            block_wq,
            block_wk,
            block_wv,
            output_proj,
            embed,
            adapters: BTreeMap::new(),
        }
    }

    fn describe_adapters(&mut self, rank: usize, alpha: f32) {
        let mut adapters = BTreeMap::new();
        for layer in self.dense_layers() {
            let rank_eff = rank.min(layer.d_in.min(layer.d_out));
            adapters.insert(layer.name.clone(), LoRAAdapter::describe(&layer.name, rank_eff, alpha));
        }
        self.adapters = adapters;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model(rng: &mut Rng) -> (VelocityModel, ParamStore) {
        let mut store = ParamStore::new();
        let cfg = VelocityModelCfg {
            input_dim: 6,
            width: 16,
            blocks: 2,
            d_t: 8,
            d_e: 8,
            d_attn: 16,
            num_classes: 4,
            activation: Act::Silu,
        };
        let model = VelocityModel::init(&mut store, cfg, rng).unwrap();
        (model, store)
    }

    #[test]
    fn output_shape_equals_input_shape() {
        let mut rng = Rng::seed_from(21);
        let (model, store) = small_model(&mut rng);
        for batch in [1usize, 3] {
            let x = Tensor::new(vec![batch, 6], rng.normal_vec(batch * 6, 1.0)).unwrap();
            let y = model.eval(&store, &x, 0.5, BatchCond::Null, false).unwrap();
            assert_eq!(y.shape(), x.shape());
        }
    }

    #[test]
    fn fresh_adapters_reproduce_base_forward_bitexactly() {
        let mut rng = Rng::seed_from(22);
        let (mut model, mut store) = small_model(&mut rng);
        model.attach_adapters(&mut store, 4, 4.0, &mut rng).unwrap();
        for trial in 0..100 {
            let x = Tensor::new(vec![2, 6], rng.normal_vec(12, 1.0)).unwrap();
            let t = rng.uniform_f32();
            let c = rng.below(4);
            let with = model.eval(&store, &x, t, BatchCond::Classes(&[c, c]), true).unwrap();
            let without = model.eval(&store, &x, t, BatchCond::Classes(&[c, c]), false).unwrap();
            assert_eq!(with, without, "trial {trial}");
        }
    }

    #[test]
    fn perturbing_one_lora_b_entry_changes_output() {
        let mut rng = Rng::seed_from(23);
        let (mut model, mut store) = small_model(&mut rng);
        model.attach_adapters(&mut store, 2, 2.0, &mut rng).unwrap();
        let x = Tensor::new(vec![1, 6], rng.normal_vec(6, 1.0)).unwrap();
        let before = model.eval(&store, &x, 0.3, BatchCond::Classes(&[1]), true).unwrap();

        let bname = "vel.block0.dense.lora_b";
        let b = store.get(bname).unwrap().clone();
        let mut data = b.data().to_vec();
        data[0] += 0.05;
        store.set(bname, Tensor::new(b.shape().to_vec(), data).unwrap()).unwrap();

        let after = model.eval(&store, &x, 0.3, BatchCond::Classes(&[1]), true).unwrap();
        let delta = before.linf_dist(&after).unwrap();
        assert!(delta > 0.0, "LoRA B perturbation had no effect");
    }

    #[test]
    fn relu_velocity_field_rejected() {
        let mut rng = Rng::seed_from(24);
        let mut store = ParamStore::new();
        let cfg = VelocityModelCfg { activation: Act::Relu, ..VelocityModelCfg::for_points(4) };
        assert!(VelocityModel::init(&mut store, cfg, &mut rng).is_err());
    }

    #[test]
    fn conditioning_changes_output() {
        let mut rng = Rng::seed_from(25);
        let (model, store) = small_model(&mut rng);
        let x = Tensor::new(vec![1, 6], rng.normal_vec(6, 1.0)).unwrap();
        let y0 = model.eval(&store, &x, 0.5, BatchCond::Classes(&[0]), false).unwrap();
        let y1 = model.eval(&store, &x, 0.5, BatchCond::Classes(&[1]), false).unwrap();
        assert!(y0.linf_dist(&y1).unwrap() > 0.0);
    }

    #[test]
    fn invalid_class_index_rejected() {
        let mut rng = Rng::seed_from(26);
        let (model, store) = small_model(&mut rng);
        let x = Tensor::new(vec![1, 6], rng.normal_vec(6, 1.0)).unwrap();
        assert!(model.eval(&store, &x, 0.5, BatchCond::Classes(&[9]), false).is_err());
    }

    #[test]
    fn meta_roundtrip_rebuilds_model() {
        let mut rng = Rng::seed_from(27);
        let (mut model, mut store) = small_model(&mut rng);
        model.attach_adapters(&mut store, 2, 2.0, &mut rng).unwrap();
        let meta = model.meta();
        let rebuilt = VelocityModel::from_meta(&meta, &store).unwrap();
        let x = Tensor::new(vec![1, 6], rng.normal_vec(6, 1.0)).unwrap();
        let a = model.eval(&store, &x, 0.25, BatchCond::Classes(&[2]), true).unwrap();
        let b = rebuilt.eval(&store, &x, 0.25, BatchCond::Classes(&[2]), true).unwrap();
        assert_eq!(a, b);
    }
}
