//! Residual fusion module: four nested dilated layers with a shortcut
//! around each pair.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Element, Tape, Var};

use super::params::{ConvRef, ParamStore};
use super::spec::{RfmSpec, RFM_LAYERS};

/// K parallel 3x3 convolutions, group k with dilation 2^(k-1), outputs
/// concatenated along channels.
#[derive(Clone, Debug)]
pub struct NestedLayer {
    pub groups: Vec<ConvRef>,
}

impl NestedLayer {
    /// Pre-activation output.
    pub fn apply<T: Element>(&self, tape: &mut Tape<T>, x: Var, bound: &[Var]) -> Result<Var> {
        let outs = self
            .groups
            .iter()
            .map(|g| g.apply(tape, x, bound))
            .collect::<Result<Vec<_>>>()?;
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            tape.concat_channels(&outs)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Rfm {
    pub spec: RfmSpec,
    pub layers: Vec<NestedLayer>,
    /// 1x1 projection on the first shortcut when channel counts differ.
    pub projection: Option<ConvRef>,
}

pub fn build_rfm<T: Element>(
    spec: RfmSpec,
    name: &str,
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
) -> Result<Rfm> {
    spec.validate()?;
    let width = spec.group_width();
    let layers = (0..RFM_LAYERS)
        .map(|l| {
            let in_ch = if l == 0 { spec.in_channels } else { spec.out_channels };
            let groups = (0..spec.dilation_groups)
                .map(|k| {
                    let d = spec.dilation(k);
                    ConvRef::create(
                        store,
                        &format!("{name}.layer{}.group{}", l + 1, k + 1),
                        in_ch,
                        width,
                        3,
                        ConvGeometry::same3x3(d),
                        rng,
                    )
                })
                .collect();
            NestedLayer { groups }
        })
        .collect();
    let projection = (spec.in_channels != spec.out_channels).then(|| {
        ConvRef::create(
            store,
            &format!("{name}.shortcut"),
            spec.in_channels,
            spec.out_channels,
            1,
            ConvGeometry::pointwise(),
            rng,
        )
    });
    Ok(Rfm {
        spec,
        layers,
        projection,
    })
}

impl Rfm {
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, x: Var, bound: &[Var]) -> Result<Var> {
        let c = tape.shape(x).c;
        if c != self.spec.in_channels {
            return Err(Error::shape(
                "rfm_forward",
                format!("input has {c} channels, module expects {}", self.spec.in_channels),
            ));
        }
        let pre1 = self.layers[0].apply(tape, x, bound)?;
        let a1 = tape.relu(pre1);
        let pre2 = self.layers[1].apply(tape, a1, bound)?;
        let shortcut = match &self.projection {
            Some(p) => p.apply(tape, x, bound)?,
            None => x,
        };
        let sum2 = tape.add(pre2, shortcut)?;
        let a2 = tape.relu(sum2);
        let pre3 = self.layers[2].apply(tape, a2, bound)?;
        let a3 = tape.relu(pre3);
        let pre4 = self.layers[3].apply(tape, a3, bound)?;
        let sum4 = tape.add(pre4, a2)?;
        Ok(tape.relu(sum4))
    }
}
