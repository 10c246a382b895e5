use super::{ModelConfig, NetError, Result};
use crate::tensor::{ParamBinding, ParamStore, Tape, Tensor, Var, LAYER_NORM_EPS};

/// Parameter lookup plus the transformer building blocks. Layer norms carry
/// no affine parameters; the following linear layer absorbs them.
pub(super) struct Net<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a ParamStore,
    pub bind: &'a ParamBinding,
    pub heads: usize,
}

impl Net<'_> {
    pub fn p(&self, name: &str) -> Result<Var> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| NetError::MissingParam(name.to_string()))?;
        Ok(self.bind.var(id))
    }

    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add(y, b)?)
    }

    /// `[H, W, c]` variables to one `[n, H, W, c]` batch.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let mut parts = Vec::with_capacity(xs.len());
        for &x in xs {
            let mut shape = vec![1];
            shape.extend_from_slice(self.tape.shape(x));
            parts.push(self.tape.reshape(x, &shape)?);
        }
        Ok(self.tape.concat(&parts, 0)?)
    }

    /// Multi-head attention of `q_in [b, lq, C]` over `kv_in [b, lk, C]`.
    /// `mask` is additive with shape `[lq, lk]`.
    pub fn attention(
        &mut self,
        q_in: Var,
        kv_in: Var,
        prefix: &str,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        let (b, lq, c) = dims3(self.tape.shape(q_in));
        let lk = self.tape.shape(kv_in)[1];
        let h = self.heads;
        let d = c / h;
        let q = self.linear(q_in, &format!("{prefix}.q"))?;
        let q = self.tape.reshape(q, &[b, lq, h, d])?;
        let q = self.tape.permute(q, &[0, 2, 1, 3])?;
        let k = self.linear(kv_in, &format!("{prefix}.k"))?;
        let k = self.tape.reshape(k, &[b, lk, h, d])?;
        let k = self.tape.permute(k, &[0, 2, 3, 1])?;
        let v = self.linear(kv_in, &format!("{prefix}.v"))?;
        let v = self.tape.reshape(v, &[b, lk, h, d])?;
        let v = self.tape.permute(v, &[0, 2, 1, 3])?;
        let s = self.tape.matmul(q, k)?;
        let s = self.tape.scale(s, 1.0 / (d as f64).sqrt())?;
        let a = self.tape.masked_softmax(s, mask)?;
        let o = self.tape.matmul(a, v)?;
        let o = self.tape.permute(o, &[0, 2, 1, 3])?;
        let o = self.tape.reshape(o, &[b, lq, c])?;
        self.linear(o, &format!("{prefix}.o"))
    }

    /// `x + Attn(LN x)` within each leading-axis slice.
    pub fn self_block(&mut self, x: Var, prefix: &str, mask: Option<&Tensor>) -> Result<Var> {
        let h = self.tape.layer_norm(x, LAYER_NORM_EPS)?;
        let a = self.attention(h, h, prefix, mask)?;
        Ok(self.tape.add(x, a)?)
    }

    /// `x + Attn(LN x)` over all tokens of `x [a, b, C]` jointly.
    pub fn global_block(&mut self, x: Var, prefix: &str, mask: Option<&Tensor>) -> Result<Var> {
        let (a, b, c) = dims3(self.tape.shape(x));
        let flat = self.tape.reshape(x, &[1, a * b, c])?;
        let y = self.self_block(flat, prefix, mask)?;
        Ok(self.tape.reshape(y, &[a, b, c])?)
    }

    /// Attention update for views `views` of `x [V, L, C]` against the
    /// normalized memory `[1, V·L, C]`.
    pub fn cross(
        &mut self,
        x: Var,
        memory: Var,
        views: std::ops::Range<usize>,
        l: usize,
        prefix: &str,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        let c = self.tape.shape(x)[2];
        let q = self.tape.slice(memory, 1, views.start * l, views.end * l)?;
        let a = self.attention(q, memory, prefix, mask)?;
        Ok(self.tape.reshape(a, &[views.len(), l, c])?)
    }

    /// `x + MLP(LN x)` with a GELU hidden layer.
    pub fn mlp_block(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.tape.layer_norm(x, LAYER_NORM_EPS)?;
        let h = self.linear(h, &format!("{prefix}.fc1"))?;
        let h = self.tape.gelu(h)?;
        let h = self.linear(h, &format!("{prefix}.fc2"))?;
        Ok(self.tape.add(x, h)?)
    }

    /// Per-token `[n, gh·gw, p·p·ch]` to pixels `[n, H, W, ch]`.
    pub fn unpatchify(&mut self, y: Var, cfg: &ModelConfig, ch: usize) -> Result<Var> {
        let n = self.tape.shape(y)[0];
        let p = cfg.patch;
        let (gh, gw) = cfg.grid();
        let y = self.tape.reshape(y, &[n, gh, gw, p, p, ch])?;
        let y = self.tape.permute(y, &[0, 1, 3, 2, 4, 5])?;
        Ok(self.tape.reshape(y, &[n, cfg.height, cfg.width, ch])?)
    }
}

fn dims3(s: &[usize]) -> (usize, usize, usize) {
    (s[0], s[1], s[2])
}
