//! Dense layers and low-rank adapters.

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::{Binding, ParamStore, Tape, Tensor, Var};

/// Dense layer descriptor. Weight is stored output-major as `{name}.w`
/// ([d_out, d_in]); the optional bias as `{name}.b` ([d_out]).
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub bias: bool,
}

impl LinearLayer {
    /// Create parameters (gaussian weights, zero bias) and return a descriptor.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let std = 1.0 / (d_in as f32).sqrt();
        let w = Tensor::new(vec![d_out, d_in], rng.normal_vec(d_out * d_in, std))?;
        store.insert(&format!("{name}.w"), w, true)?;
        if bias {
            store.insert(&format!("{name}.b"), Tensor::zeros(vec![d_out]), true)?;
        }
        Ok(LinearLayer { name: name.to_string(), d_in, d_out, bias })
    }

    /// Descriptor for parameters that already exist in the store.
    pub fn describe(name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        LinearLayer { name: name.to_string(), d_in, d_out, bias }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    /// Effective weight on the tape: W alone, or W + (alpha/r) B A when an
    /// adapter is supplied and enabled. A freshly initialized adapter has
    /// B = 0, so the adapted weight equals the base weight exactly.
    pub fn effective_weight(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        store: &ParamStore,
        adapter: Option<&LoRAAdapter>,
        use_lora: bool,
    ) -> Result<Var> {
        let w = bind.bind(tape, store, &self.weight_name())?;
        match adapter {
            Some(ad) if use_lora => {
                let a = bind.bind(tape, store, &ad.a_name())?;
                let b = bind.bind(tape, store, &ad.b_name())?;
                let delta = tape.matmul(b, a)?;
                let scaled = tape.scale(delta, (ad.alpha / ad.rank as f32) as f64)?;
                tape.add(w, scaled)
            }
            _ => Ok(w),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        store: &ParamStore,
        x: Var,
        adapter: Option<&LoRAAdapter>,
        use_lora: bool,
    ) -> Result<Var> {
        let w = self.effective_weight(tape, bind, store, adapter, use_lora)?;
        let b = if self.bias { Some(bind.bind(tape, store, &self.bias_name())?) } else { None };
        tape.linear(x, w, b)
    }
}

/// Low-rank adapter for one dense layer: `{layer}.lora_a` is [r, d_in]
/// (gaussian, std 0.02), `{layer}.lora_b` is [d_out, r] (zeros). The update
/// applied is (alpha/r) B A.
#[derive(Debug, Clone)]
pub struct LoRAAdapter {
    pub layer_name: String,
    pub rank: usize,
    pub alpha: f32,
}

impl LoRAAdapter {
    pub fn init(
        store: &mut ParamStore,
        layer: &LinearLayer,
        rank: usize,
        alpha: f32,
        rng: &mut Rng,
    ) -> Result<Self> {
        if rank == 0 || rank > layer.d_in.min(layer.d_out) {
            return Err(CoreError::InvalidArgument(format!(
                "lora rank {rank} invalid for {}x{} layer",
                layer.d_out, layer.d_in
            )));
        }
        let a = Tensor::new(vec![rank, layer.d_in], rng.normal_vec(rank * layer.d_in, 0.02))?;
        store.insert(&format!("{}.lora_a", layer.name), a, true)?;
        store.insert(
            &format!("{}.lora_b", layer.name),
            Tensor::zeros(vec![layer.d_out, rank]),
            true,
        )?;
        Ok(LoRAAdapter { layer_name: layer.name.clone(), rank, alpha })
    }

    pub fn describe(layer_name: &str, rank: usize, alpha: f32) -> Self {
        LoRAAdapter { layer_name: layer_name.to_string(), rank, alpha }
    }

    pub fn a_name(&self) -> String {
        format!("{}.lora_a", self.layer_name)
    }

    pub fn b_name(&self) -> String {
        format!("{}.lora_b", self.layer_name)
    }
}

/// Attention of a single query vector over shared condition rows, on a fresh
/// tape. `z`: [d_z], `e`: [R, d_e]; weights output-major ([d, d_z] / [d, d_e]).
/// Returns (output, attention weights over the R rows).
pub fn cross_attention_single(
    z: &Tensor,
    e: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
) -> Result<(Tensor, Vec<f32>)> {
    if z.shape().len() != 1 || e.shape().len() != 2 {
        return Err(CoreError::Shape(format!(
            "cross_attention_single: z {:?}, e {:?}",
            z.shape(),
            e.shape()
        )));
    }
    let r = e.shape()[0];
    let mut tape = Tape::new();
    let zv = {
        let z2 = z.reshaped(vec![1, z.numel()])?;
        tape.constant(&z2)
    };
    let ev = {
        let e3 = e.reshaped(vec![1, r, e.shape()[1]])?;
        tape.constant(&e3)
    };
    let wqv = tape.constant(wq);
    let wkv = tape.constant(wk);
    let wvv = tape.constant(wv);
    let out = tape.cross_attention(zv, ev, wqv, wkv, wvv)?;
    let d = tape.shape(out)[1];
    let out_t = tape.value(out).reshaped(vec![d])?;
    // recover the attention weights by re-running the softmax scores
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = vec![0.0f64; r];
    for (rr, srow) in scores.iter_mut().enumerate() {
        let erow = &e.data()[rr * e.shape()[1]..(rr + 1) * e.shape()[1]];
        let mut s = 0.0f64;
        for o in 0..d {
            let q: f64 = wq
                .data()[o * z.numel()..(o + 1) * z.numel()]
                .iter()
                .zip(z.data())
                .map(|(&w, &x)| w as f64 * x as f64)
                .sum();
            let k: f64 = wk.data()[o * erow.len()..(o + 1) * erow.len()]
                .iter()
                .zip(erow)
                .map(|(&w, &x)| w as f64 * x as f64)
                .sum();
            s += q * k;
        }
        *srow = s * scale;
    }
    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
    let zsum: f64 = exps.iter().sum();
    let attn: Vec<f32> = exps.iter().map(|e| (e / zsum) as f32).collect();
    Ok((out_t, attn))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn zero_b_means_base_layer_exactly() {
        let mut rng = Rng::seed_from(1);
        let mut store = ParamStore::new();
        let layer = LinearLayer::init(&mut store, "l", 4, 3, true, &mut rng).unwrap();
        let adapter = LoRAAdapter::init(&mut store, &layer, 2, 8.0, &mut rng).unwrap();

        let x = tensor(vec![2, 4], rng.normal_vec(8, 1.0));
        let run = |use_lora: bool| {
            let mut tape = Tape::new();
            let mut bind = Binding::new();
            let xv = tape.constant(&x);
            let y = layer
                .forward(&mut tape, &mut bind, &store, xv, Some(&adapter), use_lora)
                .unwrap();
            tape.value(y)
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn lora_hand_matrix_oracle() {
        // r=1, A=[1,0], B=[0,1]^T, alpha=1, W=0, b=0, x=[3,5] -> y=[0,3]
        let mut store = ParamStore::new();
        store.insert("l.w", Tensor::zeros(vec![2, 2]), false).unwrap();
        store.insert("l.b", Tensor::zeros(vec![2]), false).unwrap();
        store.insert("l.lora_a", tensor(vec![1, 2], vec![1.0, 0.0]), true).unwrap();
        store.insert("l.lora_b", tensor(vec![2, 1], vec![0.0, 1.0]), true).unwrap();
        let layer = LinearLayer::describe("l", 2, 2, true);
        let adapter = LoRAAdapter::describe("l", 1, 1.0);

        let mut tape = Tape::new();
        let mut bind = Binding::new();
        let x = tape.constant(&tensor(vec![1, 2], vec![3.0, 5.0]));
        let y = layer.forward(&mut tape, &mut bind, &store, x, Some(&adapter), true).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 3.0]);
    }

    #[test]
    fn zero_alpha_disables_update() {
        let mut rng = Rng::seed_from(3);
        let mut store = ParamStore::new();
        let layer = LinearLayer::init(&mut store, "l", 3, 3, false, &mut rng).unwrap();
        let mut adapter = LoRAAdapter::init(&mut store, &layer, 2, 4.0, &mut rng).unwrap();
        // nonzero B so only alpha=0 can neutralize the branch
        store
            .set("l.lora_b", tensor(vec![3, 2], vec![1.0, -1.0, 0.5, 2.0, -0.5, 0.25]))
            .unwrap();
        adapter.alpha = 0.0;

        let x = tensor(vec![1, 3], vec![0.5, -1.0, 2.0]);
        let mut tape = Tape::new();
        let mut bind = Binding::new();
        let xv = tape.constant(&x);
        let with = layer.forward(&mut tape, &mut bind, &store, xv, Some(&adapter), true).unwrap();
        let without = layer.forward(&mut tape, &mut bind, &store, xv, None, false).unwrap();
        assert_eq!(tape.value(with), tape.value(without));
    }

    #[test]
    fn lora_rank_bounds_validated() {
        let mut rng = Rng::seed_from(4);
        let mut store = ParamStore::new();
        let layer = LinearLayer::init(&mut store, "l", 4, 2, false, &mut rng).unwrap();
        assert!(LoRAAdapter::init(&mut store, &layer, 0, 1.0, &mut rng).is_err());
        assert!(LoRAAdapter::init(&mut store, &layer, 3, 1.0, &mut rng).is_err());
    }

    #[test]
    fn attention_single_condition_row_returns_value_projection() {
        // softmax over one logit is 1, so the output is e W_V^T regardless of z
        let mut rng = Rng::seed_from(5);
        let (dz, de, d) = (3, 4, 5);
        let z = tensor(vec![dz], rng.normal_vec(dz, 1.0));
        let e = tensor(vec![1, de], rng.normal_vec(de, 1.0));
        let wq = tensor(vec![d, dz], rng.normal_vec(d * dz, 1.0));
        let wk = tensor(vec![d, de], rng.normal_vec(d * de, 1.0));
        let wv = tensor(vec![d, de], rng.normal_vec(d * de, 1.0));
        let (out, attn) = cross_attention_single(&z, &e, &wq, &wk, &wv).unwrap();
        assert_eq!(attn, vec![1.0]);
        for o in 0..d {
            let expect: f64 = wv.data()[o * de..(o + 1) * de]
                .iter()
                .zip(e.data())
                .map(|(&w, &x)| w as f64 * x as f64)
                .sum();
            assert!((out.data()[o] as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_two_identical_rows_average_to_value_projection() {
        let mut rng = Rng::seed_from(6);
        let (dz, de, d) = (3, 4, 5);
        let z = tensor(vec![dz], rng.normal_vec(dz, 1.0));
        let row: Vec<f32> = rng.normal_vec(de, 1.0);
        let mut two = row.clone();
        two.extend_from_slice(&row);
        let e = tensor(vec![2, de], two);
        let wq = tensor(vec![d, dz], rng.normal_vec(d * dz, 1.0));
        let wk = tensor(vec![d, de], rng.normal_vec(d * de, 1.0));
        let wv = tensor(vec![d, de], rng.normal_vec(d * de, 1.0));
        let (out, attn) = cross_attention_single(&z, &e, &wq, &wk, &wv).unwrap();
        assert!((attn[0] - 0.5).abs() < 1e-6 && (attn[1] - 0.5).abs() < 1e-6);
        for o in 0..d {
            let expect: f64 = wv.data()[o * de..(o + 1) * de]
                .iter()
                .zip(&row)
                .map(|(&w, &x)| w as f64 * x as f64)
                .sum();
            assert!((out.data()[o] as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_matches_brute_force_formula() {
        // independent dense-algebra oracle over a random 2-row condition
        let mut rng = Rng::seed_from(7);
        let (dz, de, d, r) = (4, 3, 6, 2);
        let z = tensor(vec![dz], rng.normal_vec(dz, 1.0));
        let e = tensor(vec![r, de], rng.normal_vec(r * de, 1.0));
        let wq = tensor(vec![d, dz], rng.normal_vec(d * dz, 0.7));
        let wk = tensor(vec![d, de], rng.normal_vec(d * de, 0.7));
        let wv = tensor(vec![d, de], rng.normal_vec(d * de, 0.7));
        let (out, attn) = cross_attention_single(&z, &e, &wq, &wk, &wv).unwrap();

        // brute force: q = Wq z, K_r = Wk e_r, V_r = Wv e_r, softmax(qK^T/sqrt(d)) V
        let mat_vec = |w: &Tensor, x: &[f32]| -> Vec<f64> {
            (0..d)
                .map(|o| {
                    w.data()[o * x.len()..(o + 1) * x.len()]
                        .iter()
                        .zip(x)
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum()
                })
                .collect()
        };
        let q = mat_vec(&wq, z.data());
        let mut scores = vec![0.0f64; r];
        let mut vrows = Vec::new();
        for rr in 0..r {
            let erow = &e.data()[rr * de..(rr + 1) * de];
            let krow = mat_vec(&wk, erow);
            scores[rr] =
                q.iter().zip(&krow).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt();
            vrows.push(mat_vec(&wv, erow));
        }
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let zsum: f64 = exps.iter().sum();
        let weights: Vec<f64> = exps.iter().map(|e| e / zsum).collect();
        for o in 0..d {
            let expect: f64 = (0..r).map(|rr| weights[rr] * vrows[rr][o]).sum();
            assert!(
                (out.data()[o] as f64 - expect).abs() < 1e-6,
                "coord {o}: {} vs {expect}",
                out.data()[o]
            );
        }
        let wsum: f32 = attn.iter().sum();
        assert!((wsum - 1.0).abs() < 1e-6);
    }
}
