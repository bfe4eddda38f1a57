//! Model files: versioned JSON with full-precision parameters.
//!
//! Three families are recognized: `odenet` (field architecture plus
//! integration window), `iresnet` (block architectures plus normalization
//! settings), and `constructed-iresnet` (rebuilt from the homeomorphism
//! registry on load, since its layers wrap closures). All writes are atomic:
//! write to a temporary file, then rename.

use std::path::Path;

use crate::autodiff::ParamStore;
use crate::construct::{build_iresnet_for, lookup, LayerBudget};
use crate::error::{Error, Result};
use crate::iresnet::{IResNet, ResidualBlock};
use crate::nn::Mlp;
use crate::odenet::{OdeBlock, OdeField};

/// A deserialized model of either invertible family.
pub enum Model {
    Ode(OdeBlock),
    IRes(IResNet),
}

/// Write `contents` to `path` atomically.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn fmt_f64(v: f64) -> String {
    format!("{:.16e}", v)
}

/// Splice a hand-formatted params document into a serde-built header.
fn with_params(header: serde_json::Value, store: &ParamStore) -> String {
    let mut s = serde_json::to_string(&header).expect("header serializes");
    s.pop();
    s.push_str(",\"params\":");
    s.push_str(&store.to_json());
    s.push('}');
    s
}

/// ODE model document; `cap` carries an optional linear readout trained on
/// top of the flow.
pub fn ode_model_json(block: &OdeBlock, cap: Option<&Mlp>) -> String {
    let mut header = serde_json::json!({
        "format_version": 1,
        "family": "odenet",
        "t0": block.t0,
        "t1": block.t1,
        "steps": block.steps,
        "q": block.width(),
        "time_dependent": block.field.is_time_dependent(),
        "field": serde_json::to_value(&block.field).expect("field serializes"),
    });
    if let Some(cap) = cap {
        header["cap"] = serde_json::to_value(cap).expect("cap serializes");
    }
    with_params(header, &block.store)
}

/// Residual-stack model document with per-block normalization settings.
pub fn iresnet_model_json(net: &IResNet, c: f64, power_iters: usize) -> Result<String> {
    let mut blocks = Vec::new();
    for block in &net.blocks {
        match &block.kind {
            crate::iresnet::ResidualKind::Mlp(mlp) => blocks.push(serde_json::json!({
                "mlp": serde_json::to_value(mlp).expect("mlp serializes"),
                "c": c,
                "power_iters": power_iters,
            })),
            other => {
                let label = match other {
                    crate::iresnet::ResidualKind::CrossShift { coeff, .. } => {
                        format!("cross-shift:{coeff}")
                    }
                    crate::iresnet::ResidualKind::Func { label, .. } => label.clone(),
                    crate::iresnet::ResidualKind::Mlp(_) => unreachable!(),
                };
                return Err(Error::InvalidArgument(format!(
                    "block '{label}' has no parametric form; save it as a constructed model"
                )));
            }
        }
    }
    let header = serde_json::json!({
        "format_version": 1,
        "family": "iresnet",
        "width": net.width,
        "blocks": blocks,
    });
    Ok(with_params(header, &net.store))
}

/// Constructed stacks are identified by recipe, not by weights.
pub fn constructed_model_json(homeomorphism: &str, k: f64, budget: LayerBudget) -> String {
    let variant = match budget {
        LayerBudget::Standard => "standard",
        LayerBudget::StrictMargin => "strict-margin",
    };
    format!(
        "{{\"format_version\":1,\"family\":\"constructed-iresnet\",\"homeomorphism\":{:?},\"k\":{},\"variant\":\"{}\"}}",
        homeomorphism,
        fmt_f64(k),
        variant
    )
}

pub fn save_model(path: &Path, json: &str) -> Result<()> {
    write_atomic(path, json)
}

pub fn load_model(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path)?;
    let doc: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::ModelFormat(format!("{}: {e}", path.display())))?;
    model_from_value(&doc)
}

pub fn model_from_value(doc: &serde_json::Value) -> Result<Model> {
    let bad = Error::ModelFormat;
    let version = doc
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| bad("missing format_version".into()))?;
    if version != 1 {
        return Err(bad(format!("unsupported format_version {version}")));
    }
    let family = doc
        .get("family")
        .and_then(|v| v.as_str())
        .ok_or_else(|| bad("missing family".into()))?;
    match family {
        "odenet" => {
            let field: OdeField = serde_json::from_value(
                doc.get("field")
                    .cloned()
                    .ok_or_else(|| bad("odenet model without field".into()))?,
            )
            .map_err(|e| bad(format!("bad field description: {e}")))?;
            let t0 = doc
                .get("t0")
                .and_then(|v| v.as_f64())
                .ok_or_else(|| bad("missing t0".into()))?;
            let t1 = doc
                .get("t1")
                .and_then(|v| v.as_f64())
                .ok_or_else(|| bad("missing t1".into()))?;
            let steps = doc
                .get("steps")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| bad("missing steps".into()))? as usize;
            let store = ParamStore::from_json(
                doc.get("params")
                    .ok_or_else(|| bad("missing params".into()))?,
            )?;
            Ok(Model::Ode(OdeBlock::new(field, t0, t1, steps, store)))
        }
        "iresnet" => {
            let blocks = doc
                .get("blocks")
                .and_then(|v| v.as_array())
                .ok_or_else(|| bad("iresnet model without blocks".into()))?;
            let width = doc
                .get("width")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| bad("missing width".into()))? as usize;
            let mut net = IResNet::new(width);
            for b in blocks {
                let mlp: Mlp = serde_json::from_value(
                    b.get("mlp")
                        .cloned()
                        .ok_or_else(|| bad("block without mlp".into()))?,
                )
                .map_err(|e| bad(format!("bad block description: {e}")))?;
                net.blocks.push(ResidualBlock::mlp(mlp));
            }
            net.store = ParamStore::from_json(
                doc.get("params")
                    .ok_or_else(|| bad("missing params".into()))?,
            )?;
            Ok(Model::IRes(net))
        }
        "constructed-iresnet" => {
            let name = doc
                .get("homeomorphism")
                .and_then(|v| v.as_str())
                .ok_or_else(|| bad("missing homeomorphism name".into()))?;
            let k = doc
                .get("k")
                .and_then(|v| v.as_f64())
                .ok_or_else(|| bad("missing k".into()))?;
            let budget = match doc.get("variant").and_then(|v| v.as_str()) {
                Some("standard") | None => LayerBudget::Standard,
                Some("strict-margin") => LayerBudget::StrictMargin,
                Some(other) => return Err(bad(format!("unknown variant '{other}'"))),
            };
            let h = lookup(name)?;
            Ok(Model::IRes(build_iresnet_for(&h, k, budget)?))
        }
        other => Err(bad(format!("unknown family '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    #[test]
    fn ode_model_round_trips_bit_exact() {
        let net = Mlp::new("f", &[2, 6, 2], Activation::Tanh, true);
        let mut store = ParamStore::new();
        net.init_params(&mut store, &mut Rng::new(9));
        let block = OdeBlock::new(OdeField::autonomous(net), 0.0, 1.0, 100, store);
        let json = ode_model_json(&block, None);

        let doc: serde_json::Value = serde_json::from_str(&json).unwrap();
        let restored = match model_from_value(&doc).unwrap() {
            Model::Ode(b) => b,
            _ => panic!("wrong family"),
        };
        assert_eq!(restored.steps, 100);
        assert_eq!(restored.width(), 2);
        for (a, b) in block.store.flatten().iter().zip(restored.store.flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let x = Tensor::vector(&[0.3, -0.4]);
        assert_eq!(
            block.integrate(&x).unwrap().data(),
            restored.integrate(&x).unwrap().data()
        );
    }

    #[test]
    fn iresnet_model_round_trips() {
        let mut rng = Rng::new(10);
        let mut net = IResNet::trainable(2, 3, &[], Activation::Tanh, false, &mut rng);
        net.normalize(0.9, 50);
        let json = iresnet_model_json(&net, 0.9, 1).unwrap();
        let doc: serde_json::Value = serde_json::from_str(&json).unwrap();
        let restored = match model_from_value(&doc).unwrap() {
            Model::IRes(n) => n,
            _ => panic!("wrong family"),
        };
        let x = Tensor::vector(&[1.0, -2.0]);
        assert_eq!(
            net.forward(&x).unwrap().data(),
            restored.forward(&x).unwrap().data()
        );
    }

    #[test]
    fn constructed_model_rebuilds_from_the_registry() {
        let json = constructed_model_json("negation", 1.0, LayerBudget::Standard);
        let doc: serde_json::Value = serde_json::from_str(&json).unwrap();
        let net = match model_from_value(&doc).unwrap() {
            Model::IRes(n) => n,
            _ => panic!("wrong family"),
        };
        assert_eq!(net.blocks.len(), 5);
        let out = net.forward(&Tensor::vector(&[3.0, 0.0])).unwrap();
        assert!((out.data()[0] + 3.0).abs() < 1e-12);
        assert!(out.data()[1].abs() < 1e-12);
    }

    #[test]
    fn atomic_write_creates_parents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/out/model.json");
        write_atomic(&path, "{}").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "{}");
    }
}
