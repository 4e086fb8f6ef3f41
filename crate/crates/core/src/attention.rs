use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tape::Tape;
use crate::tensor::Tensor;

impl<T: Scalar> Tape<T> {
    /// `softmax(q·kᵀ/√d)·v` for `q[Lq, d]`, `k[Lk, d]`, `v[Lk, dv]`.
    ///
    /// Keys with `key_mask[j] == false` are excluded from every softmax row.
    pub fn scaled_dot_attention(
        &self,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        key_mask: Option<&[bool]>,
    ) -> Result<Tensor<T>> {
        let (out, _) = self.attention_with_weights(q, k, v, key_mask)?;
        Ok(out)
    }

    /// Like [`Tape::scaled_dot_attention`], also returning the `[Lq, Lk]`
    /// attention matrix.
    pub fn attention_with_weights(
        &self,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        key_mask: Option<&[bool]>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
            return Err(Error::dim(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
            ));
        }
        let d = q.shape()[1];
        if d == 0 {
            return Err(Error::dim("attention", "feature dimension is zero"));
        }
        if k.shape()[1] != d || k.shape()[0] != v.shape()[0] {
            return Err(Error::dim(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
            ));
        }
        let scores = self.matmul(q, &self.transpose(k)?)?;
        let scores = self.scale(&scores, T::one() / lit::<T>(d as f64).sqrt());
        let attn = self.softmax(&scores, key_mask)?;
        Ok((self.matmul(&attn, v)?, attn))
    }
}
