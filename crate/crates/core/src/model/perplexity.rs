use crate::error::{Error, Result};
use crate::numerics::{categorical_ce_with_logits, Tensor};

/// Anything that maps a token sequence to next-token logits.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;

    /// Logits `[len × vocab_size]`; row `t` predicts token `t + 1`.
    fn logits(&self, tokens: &[usize]) -> Result<Tensor>;
}

/// `exp` of the mean next-token negative log-likelihood of `tokens` under
/// precomputed `logits`.
pub fn perplexity_from_logits(logits: &Tensor, tokens: &[usize]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "perplexity needs at least 2 tokens, got {}",
            tokens.len()
        )));
    }
    if logits.rows() < tokens.len() - 1 {
        return Err(Error::Shape("fewer logit rows than predicted tokens".into()));
    }
    let mut total = 0.0;
    for t in 1..tokens.len() {
        total += categorical_ce_with_logits(logits.row(t - 1), tokens[t])?;
    }
    Ok((total / (tokens.len() - 1) as f64).exp())
}

pub fn perplexity<M: LanguageModel + ?Sized>(model: &M, tokens: &[usize]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "perplexity needs at least 2 tokens, got {}",
            tokens.len()
        )));
    }
    perplexity_from_logits(&model.logits(tokens)?, tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Uniform(usize);

    impl LanguageModel for Uniform {
        fn vocab_size(&self) -> usize {
            self.0
        }
        fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
            Ok(Tensor::zeros(&[tokens.len(), self.0]))
        }
    }

    /// Puts a margin of 100 on the true next token of a fixed sequence.
    struct Oracle(Vec<usize>, usize, f64);

    impl LanguageModel for Oracle {
        fn vocab_size(&self) -> usize {
            self.1
        }
        fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
            let mut t = Tensor::full(&[tokens.len(), self.1], self.2);
            for i in 0..tokens.len() - 1 {
                t.data_mut()[i * self.1 + self.0[i + 1]] += 100.0;
            }
            Ok(t)
        }
    }

    #[test]
    fn uniform_is_vocab_size() {
        let p = perplexity(&Uniform(64), &[1, 2, 3, 4, 5]).unwrap();
        assert!((p - 64.0).abs() < 1e-9);
    }

    #[test]
    fn certain_model_is_one() {
        let seq = vec![3, 1, 4, 1, 5];
        let p = perplexity(&Oracle(seq.clone(), 8, 0.0), &seq).unwrap();
        assert!((p - 1.0).abs() < 1e-9);
    }

    #[test]
    fn shift_invariant() {
        let seq = vec![3, 1, 4, 1, 5];
        let mut m = Oracle(seq.clone(), 8, 0.0);
        m.0 = vec![0, 2, 2, 7, 6];
        let a = perplexity(&m, &seq).unwrap();
        m.2 = 13.5;
        let b = perplexity(&m, &seq).unwrap();
        assert!((a - b).abs() < 1e-9 * a);
    }

    #[test]
    fn too_short() {
        assert!(perplexity(&Uniform(4), &[1]).is_err());
    }
}
