//! Incremental decoding with cached keys and values.
//!
//! Rows are appended in groups (the prompt, single trace tokens, or an action
//! block) and computed with the same per-row functions as the full forward
//! pass, so logits agree bit for bit with [`Model::forward`].

use super::model::{attend, Model};
use super::sequence::{visible_keys, Input};
use std::ops::Range;

pub struct Decoder<'m, 'p> {
    model: &'m Model<'p>,
    prefix_len: usize,
    rows: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    evidence: Vec<Vec<f64>>,
}

impl<'m, 'p> Decoder<'m, 'p> {
    /// Encodes the prompt and returns the decoder with the logits of the last prompt row.
    pub fn new(model: &'m Model<'p>, prompt: &[Input]) -> (Self, Vec<f64>) {
        let layers = model.cfg.n_layers;
        let mut dec = Decoder {
            model,
            prefix_len: prompt.len(),
            rows: 0,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            evidence: Vec::new(),
        };
        let mut logits = dec.extend(prompt, None);
        (dec, logits.pop().expect("prompt is non-empty"))
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    /// Appends one causal row and returns its logits.
    pub fn push(&mut self, input: Input) -> Vec<f64> {
        self.extend(&[input], None).pop().expect("one row")
    }

    /// Appends an evidence row carrying `feature` (or the tool-error embedding).
    pub fn push_evidence(&mut self, token: u32, pos: usize, feature: Option<Vec<f64>>) -> Vec<f64> {
        let feature = feature.map(|f| {
            self.evidence.push(f);
            self.evidence.len() - 1
        });
        self.push(Input::Evidence {
            token,
            pos,
            feature,
        })
    }

    /// Appends a bidirectional block and returns the logits of each of its rows.
    pub fn push_block(&mut self, inputs: &[Input]) -> Vec<Vec<f64>> {
        let block = self.rows..self.rows + inputs.len();
        self.extend(inputs, Some(block))
    }

    fn extend(&mut self, inputs: &[Input], block: Option<Range<usize>>) -> Vec<Vec<f64>> {
        let m = self.model;
        let d = m.cfg.d_model;
        let hd = m.cfg.mlp_hidden;
        let start = self.rows;
        let g = inputs.len();
        let scale = m.scale();
        let mut x = vec![0.0; g * d];
        for (i, inp) in inputs.iter().enumerate() {
            m.embed(inp, &self.evidence, &mut x[i * d..(i + 1) * d]);
        }
        let (mut xhat, mut a, mut q) = (vec![0.0; d], vec![0.0; d], vec![0.0; g * d]);
        let (mut k, mut v) = (vec![0.0; d], vec![0.0; d]);
        let (mut h, mut a2, mut xhat2) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        let (mut u, mut gg) = (vec![0.0; hd], vec![0.0; hd]);
        let mut ctx = vec![0.0; d];
        for (li, b) in m.lay.blocks.iter().enumerate() {
            for i in 0..g {
                m.qkv(
                    b,
                    &x[i * d..(i + 1) * d],
                    &mut xhat,
                    &mut a,
                    &mut q[i * d..(i + 1) * d],
                    &mut k,
                    &mut v,
                );
                self.keys[li].extend_from_slice(&k);
                self.values[li].extend_from_slice(&v);
            }
            let mut out = vec![0.0; g * d];
            for i in 0..g {
                let row = start + i;
                let nk = visible_keys(row, self.prefix_len, block.as_ref());
                let mut probs = vec![0.0; nk];
                attend(
                    &q[i * d..(i + 1) * d],
                    &self.keys[li],
                    &self.values[li],
                    nk,
                    scale,
                    &mut probs,
                    &mut ctx,
                );
                m.post_attention(
                    b,
                    &x[i * d..(i + 1) * d],
                    &ctx,
                    &mut h,
                    &mut xhat2,
                    &mut a2,
                    &mut u,
                    &mut gg,
                    &mut out[i * d..(i + 1) * d],
                );
            }
            x = out;
        }
        self.rows += g;
        let (mut xf, mut af) = (vec![0.0; d], vec![0.0; d]);
        (0..g)
            .map(|i| m.head(&x[i * d..(i + 1) * d], &mut xf, &mut af).0)
            .collect()
    }
}
