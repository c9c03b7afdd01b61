//! Parameter and multiply-accumulate accounting per stage.

use serde::Serialize;

use crate::tensor::{conv_out_extent, Element};

use super::model::SCNetModel;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageCensus {
    pub name: String,
    pub params: usize,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Census {
    pub input: (usize, usize),
    pub stages: Vec<StageCensus>,
    pub total_params: usize,
    pub total_macs: u64,
}

impl Census {
    pub fn stage(&self, name: &str) -> Option<&StageCensus> {
        self.stages.iter().find(|s| s.name == name)
    }
}

impl std::fmt::Display for Census {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<10} {:>12} {:>16}", "stage", "params", "MACs")?;
        for s in &self.stages {
            writeln!(f, "{:<10} {:>12} {:>16}", s.name, s.params, s.macs)?;
        }
        write!(
            f,
            "{:<10} {:>12} {:>16}   (input {}x{})",
            "total", self.total_params, self.total_macs, self.input.0, self.input.1
        )
    }
}

fn conv_macs(cin: usize, cout: usize, k: usize, oh: usize, ow: usize) -> u64 {
    (cin * cout * k * k) as u64 * (oh * ow) as u64
}

/// Counts for a forward pass on a single `h x w` image.
pub fn parameter_census<T: Element>(model: &SCNetModel<T>, h: usize, w: usize) -> Census {
    let spec = model.spec();
    let params = model.params();
    let mut stages = Vec::new();
    let (mut ch, mut cw) = (h, w);
    for (i, rfm) in model.rfms().iter().enumerate() {
        let name = format!("rfm{}", i + 1);
        let mut macs = 0u64;
        for layer in &rfm.layers {
            for g in &layer.groups {
                let ws = params.get(g.weight).shape();
                let oh = conv_out_extent(ch, 3, g.geometry).unwrap_or(0);
                let ow = conv_out_extent(cw, 3, g.geometry).unwrap_or(0);
                macs += conv_macs(ws.c, ws.n, 3, oh, ow);
            }
        }
        if rfm.projection.is_some() {
            macs += conv_macs(rfm.spec.in_channels, rfm.spec.out_channels, 1, ch, cw);
        }
        stages.push(StageCensus {
            params: params.count_with_prefix(&format!("{name}.")),
            name,
            macs,
        });
        ch /= 2;
        cw /= 2;
        stages.push(StageCensus {
            name: format!("pool{}", i + 1),
            params: 0,
            macs: 0,
        });
    }
    let cf = spec.feature_channels();
    stages.push(StageCensus {
        name: "ppm".into(),
        params: params.count_with_prefix("ppm."),
        macs: conv_macs((spec.ppm_levels + 1) * cf, cf, 1, ch, cw),
    });
    let r = spec.spcm_factor;
    stages.push(StageCensus {
        name: "head".into(),
        params: params.count_with_prefix("head."),
        macs: conv_macs(cf, r * r, 1, ch, cw),
    });
    // rearrangement and interpolation own no entries in the store
    for name in ["spcm", "bilinear"] {
        stages.push(StageCensus {
            name: name.into(),
            params: params.count_with_prefix(&format!("{name}.")),
            macs: 0,
        });
    }
    let total_params = stages.iter().map(|s| s.params).sum();
    debug_assert_eq!(total_params, params.total(), "every parameter belongs to a stage");
    let total_macs = stages.iter().map(|s| s.macs).sum();
    Census {
        input: (h, w),
        stages,
        total_params,
        total_macs,
    }
}
