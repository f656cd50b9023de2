use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Inner width of the encoder filter sub-layer.
    pub enc_filter: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// The production-scale shape: 40K vocabularies, width 256, six encoder
    /// and three decoder layers, encoder filter width 512.
    pub fn large_scale() -> Self {
        Self {
            src_vocab: 40_000,
            tgt_vocab: 40_000,
            d_model: 256,
            enc_layers: 6,
            dec_layers: 3,
            enc_filter: 512,
            heads: 4,
            max_len: 256,
            dropout: 0.1,
        }
    }

    /// Small model used for the synthetic desk-scale experiments.
    pub fn desk_scale(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            src_vocab,
            tgt_vocab,
            d_model: 64,
            enc_layers: 2,
            dec_layers: 1,
            enc_filter: 128,
            heads: 4,
            max_len: 64,
            dropout: 0.1,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("d_model", self.d_model),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("enc_filter", self.enc_filter),
            ("heads", self.heads),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.src_vocab <= EOS || self.tgt_vocab <= EOS {
            return Err(Error::Config(
                "vocabularies must hold the special tokens".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(ModelConfig::large_scale().validate().is_ok());
        let mut c = ModelConfig::desk_scale(20, 20);
        c.heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.heads = 4;
        c.dec_layers = 0;
        assert!(c.validate().is_err());
    }
}
