#![allow(dead_code)]

use decode_core::adcore::{Tape, Tensor, Var};
use decode_core::Result;

/// Analytic gradient of `f` at `inputs`, via the tape.
pub fn analytic_grad<F>(f: &F, inputs: &[Tensor]) -> Vec<Vec<f64>>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars).expect("forward");
    let grads = tape.backward(loss).expect("backward");
    vars.iter().map(|&v| grads.get(v).into_data()).collect()
}

pub fn eval<F>(f: &F, inputs: &[Tensor]) -> f64
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = f(&tape, &vars).expect("forward");
    tape.item(loss)
}

/// Central finite differences, independent of the tape's backward pass.
pub fn numeric_grad<F>(f: &F, inputs: &[Tensor], step: f64) -> Vec<Vec<f64>>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let mut out = Vec::new();
    for k in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[k].len());
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= step;
            g.push((eval(f, &plus) - eval(f, &minus)) / (2.0 * step));
        }
        out.push(g);
    }
    out
}

/// `||a - n|| / max(||a||, ||n||, 1e-8)` over all inputs jointly.
pub fn relative_error(a: &[Vec<f64>], n: &[Vec<f64>]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (x, y) in a.iter().flatten().zip(n.iter().flatten()) {
        diff += (x - y) * (x - y);
        na += x * x;
        nn += y * y;
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-8)
}

pub fn grad_check<F>(f: &F, inputs: &[Tensor]) -> f64
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    relative_error(&analytic_grad(f, inputs), &numeric_grad(f, inputs, 1e-5))
}

/// Small configuration that trains in well under a second.
pub fn tiny_config() -> decode_core::Config {
    let mut cfg = decode_core::Config::default();
    cfg.data.dims.t_f = 8;
    cfg.data.mix_count = 90;
    cfg.data.train_count = 40;
    cfg.data.val_count = 20;
    let m = &mut cfg.model;
    m.d_h = 8;
    m.encoder_hidden = 12;
    m.decoder_hidden = 12;
    m.modes = 3;
    m.d_q = 4;
    m.d_b = 4;
    m.flow_layers = 2;
    m.flow_hidden = 8;
    m.trunk_hidden = vec![16];
    m.chunk_decoder = 64;
    m.chunk_flow = 64;
    cfg.pretrain.epochs = 2;
    cfg.pretrain.batch_size = 32;
    cfg.pretrain.lr = 3e-3;
    cfg.expansion.epochs = 2;
    cfg.expansion.batch_size = 16;
    cfg.expansion.lr = 3e-3;
    cfg.baseline.replay_buffer = 20;
    cfg
}
