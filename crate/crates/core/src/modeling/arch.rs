use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ImageShape, Network, NetworkBuilder};

/// Registered architectures. The `-small` registry names are width-reduced
/// variants; full widths are reachable through the same variants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Arch {
    /// Fully connected ReLU network; the penultimate embedding is the last
    /// hidden layer.
    Mlp { hidden: Vec<usize> },
    /// All-convolutional network (strided convs instead of pooling) with
    /// `width` and `2 * width` channels, global average pooling and a dense head.
    AllCnn { width: usize },
    /// ResNet-18 topology (four stages of two basic blocks) starting at `width`
    /// channels; no batch normalization, residual branches start at zero.
    ResNet18 { width: usize },
}

pub const ARCH_NAMES: &[&str] = &["mlp", "allcnn-small", "allcnn", "resnet18-small", "resnet18"];

impl Arch {
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "mlp" => Arch::Mlp { hidden: vec![256, 128] },
            "allcnn-small" => Arch::AllCnn { width: 32 },
            "allcnn" => Arch::AllCnn { width: 96 },
            "resnet18-small" => Arch::ResNet18 { width: 16 },
            "resnet18" => Arch::ResNet18 { width: 64 },
            other => return Err(Error::UnknownArch(other.to_string())),
        })
    }

    /// Short identifier written into checkpoints.
    pub fn tag(&self) -> String {
        match self {
            Arch::Mlp { hidden } => {
                let dims: Vec<String> = hidden.iter().map(|h| h.to_string()).collect();
                format!("mlp-{}", dims.join("x"))
            }
            Arch::AllCnn { width } => format!("allcnn-w{width}"),
            Arch::ResNet18 { width } => format!("resnet18-w{width}"),
        }
    }

    pub fn build(&self, input: ImageShape, num_classes: usize, seed: u64) -> Result<Network> {
        if num_classes < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 classes, got {num_classes}")));
        }
        let mut b = NetworkBuilder::new(input);
        match self {
            Arch::Mlp { hidden } => {
                if hidden.is_empty() {
                    return Err(Error::InvalidConfig("mlp needs at least one hidden layer".into()));
                }
                for &h in hidden {
                    b.dense(h).relu();
                }
            }
            Arch::AllCnn { width } => {
                let (w1, w2) = (*width, 2 * width);
                b.conv(w1, 3, 1).relu().conv(w1, 3, 1).relu().conv(w1, 3, 2).relu();
                b.conv(w2, 3, 1).relu().conv(w2, 3, 1).relu().conv(w2, 3, 2).relu();
                b.conv(w2, 3, 1).relu().conv(w2, 1, 1).relu();
                b.global_avg_pool();
            }
            Arch::ResNet18 { width } => {
                let w = *width;
                b.conv(w, 3, 1).relu();
                for (stage, mult) in [1usize, 2, 4, 8].into_iter().enumerate() {
                    let stride = if stage == 0 { 1 } else { 2 };
                    b.residual(w * mult, stride).residual(w * mult, 1);
                }
                b.global_avg_pool();
            }
        }
        Ok(b.finish(num_classes, seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_names_resolve() {
        for name in ARCH_NAMES {
            Arch::from_name(name).unwrap();
        }
        assert!(matches!(Arch::from_name("vit"), Err(Error::UnknownArch(_))));
    }

    #[test]
    fn embedding_dimensions() {
        let img = ImageShape::new(8, 8, 3);
        let mlp = Arch::from_name("mlp").unwrap().build(img, 10, 0).unwrap();
        assert_eq!(mlp.embedding_dim(), 128);
        let cnn = Arch::AllCnn { width: 4 }.build(img, 10, 0).unwrap();
        assert_eq!(cnn.embedding_dim(), 8);
        let res = Arch::ResNet18 { width: 2 }.build(img, 10, 0).unwrap();
        assert_eq!(res.embedding_dim(), 16);
    }
}
