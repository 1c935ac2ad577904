use serde::{Deserialize, Serialize};

use super::{
    ClassFlow, ClassPrior, CouplingLayer, FlowConfig, FlowOracle, GaussianClass, GaussianOracle, Oracle, TwoLayerNet,
};
use crate::error::{contract, Result};
use crate::persist::{Envelope, TensorDoc};

pub use crate::persist::FORMAT_VERSION;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianParams {
    classes: Vec<GaussianClass>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetDoc {
    w1: TensorDoc,
    b1: TensorDoc,
    w2: TensorDoc,
    b2: TensorDoc,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    mask: Vec<f64>,
    s_max: f64,
    scale_net: NetDoc,
    shift_net: NetDoc,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowParams {
    config: FlowConfig,
    frozen: bool,
    flows: Vec<Vec<LayerDoc>>,
}

impl From<&TwoLayerNet> for NetDoc {
    fn from(n: &TwoLayerNet) -> Self {
        Self {
            w1: (&n.w1).into(),
            b1: (&n.b1).into(),
            w2: (&n.w2).into(),
            b2: (&n.b2).into(),
        }
    }
}

impl TryFrom<NetDoc> for TwoLayerNet {
    type Error = crate::Error;
    fn try_from(d: NetDoc) -> Result<Self> {
        let net = Self {
            w1: d.w1.try_into()?,
            b1: d.b1.try_into()?,
            w2: d.w2.try_into()?,
            b2: d.b2.try_into()?,
        };
        let (dim, hidden) = (net.w1.rows(), net.w1.cols());
        if net.b1.numel() != hidden || net.w2.shape() != [hidden, dim] || net.b2.numel() != dim {
            return contract("conditioner parameter shapes are inconsistent");
        }
        Ok(net)
    }
}

pub(crate) fn to_json(o: &Oracle) -> Result<String> {
    let (kind, parameters) = match o {
        Oracle::Gaussian(g) => (
            "gaussian",
            serde_json::to_value(GaussianParams {
                classes: g.classes().to_vec(),
            })?,
        ),
        Oracle::Flow(f) => (
            "flow",
            serde_json::to_value(FlowParams {
                config: *f.config(),
                frozen: f.is_frozen(),
                flows: f
                    .flows()
                    .iter()
                    .map(|cf| {
                        cf.layers
                            .iter()
                            .map(|l| LayerDoc {
                                mask: l.mask.clone(),
                                s_max: l.s_max,
                                scale_net: (&l.scale_net).into(),
                                shift_net: (&l.shift_net).into(),
                            })
                            .collect()
                    })
                    .collect(),
            })?,
        ),
    };
    let env = Envelope {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        k: o.num_classes(),
        d: o.dim(),
        prior: o.prior().probs().to_vec(),
        parameters,
    };
    Ok(serde_json::to_string_pretty(&env)?)
}

pub(crate) fn from_json(s: &str) -> Result<Oracle> {
    let env = Envelope::parse(s, &["gaussian", "flow"])?;
    let prior = ClassPrior::new(env.prior)?;
    if prior.len() != env.k {
        return contract(format!("prior has {} entries but K = {}", prior.len(), env.k));
    }
    let oracle = match env.kind.as_str() {
        "gaussian" => {
            let p: GaussianParams = serde_json::from_value(env.parameters)?;
            Oracle::Gaussian(GaussianOracle::new(prior, p.classes)?)
        }
        _ => {
            let p: FlowParams = serde_json::from_value(env.parameters)?;
            let flows = p
                .flows
                .into_iter()
                .map(|layers| {
                    let layers = layers
                        .into_iter()
                        .map(|l| {
                            if l.mask.len() != env.d {
                                return contract("coupling mask length differs from D");
                            }
                            Ok(CouplingLayer {
                                mask: l.mask,
                                s_max: l.s_max,
                                scale_net: l.scale_net.try_into()?,
                                shift_net: l.shift_net.try_into()?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    if layers.is_empty() {
                        return contract("class flow has no layers");
                    }
                    Ok(ClassFlow { layers })
                })
                .collect::<Result<Vec<_>>>()?;
            Oracle::Flow(FlowOracle::from_parts(prior, flows, p.config, p.frozen)?)
        }
    };
    if oracle.dim() != env.d {
        return contract(format!("parameters have dimension {} but D = {}", oracle.dim(), env.d));
    }
    Ok(oracle)
}
