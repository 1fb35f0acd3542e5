use crate::blocks::Conv;
use crate::error::{Result, SacError};
use crate::kernels::{ConvSpec, Pad2d};
use crate::params::{Builder, Graph};
use crate::real::Real;
use crate::tape::Var;

/// Additive bidirectional pyramid fusion over equal-width levels.
///
/// Per pass, top-down: `td[l] = conv(p[l] + up2(td[l+1]))` with the coarsest
/// level passed through; bottom-up: `out[l] = conv(td[l] + pool2(out[l-1]))`
/// with the finest level taken from the top-down result.
#[derive(Clone, Debug)]
pub struct Bifpn {
    pub top_down: Vec<Vec<Conv>>,
    pub bottom_up: Vec<Vec<Conv>>,
    pub levels: usize,
}

fn conv3<T: Real>(b: &mut Builder<'_, T>, name: &str, width: usize) -> Result<Conv> {
    Conv::new(
        b,
        name,
        width,
        width,
        3,
        ConvSpec::default().with_padding(Pad2d::uniform(1)),
        None,
        Some(crate::params::Init::Zeros),
    )
}

impl Bifpn {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, width: usize, levels: usize, passes: usize) -> Result<Self> {
        let mut top_down = Vec::with_capacity(passes);
        let mut bottom_up = Vec::with_capacity(passes);
        for p in 0..passes {
            let (td, bu) = b.scoped(&format!("pass{p}"), |b| -> Result<_> {
                let td = (0..levels - 1)
                    .map(|l| conv3(b, &format!("td{l}"), width))
                    .collect::<Result<Vec<_>>>()?;
                let bu = (1..levels)
                    .map(|l| conv3(b, &format!("bu{l}"), width))
                    .collect::<Result<Vec<_>>>()?;
                Ok((td, bu))
            })?;
            top_down.push(td);
            bottom_up.push(bu);
        }
        Ok(Self {
            top_down,
            bottom_up,
            levels,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, pyramid: &[Var]) -> Result<Vec<Var>> {
        if pyramid.len() != self.levels {
            return Err(SacError::shape(
                "bifpn",
                format!("{} levels given, {} expected", pyramid.len(), self.levels),
            ));
        }
        let mut p = pyramid.to_vec();
        for (td_convs, bu_convs) in self.top_down.iter().zip(&self.bottom_up) {
            let top = self.levels - 1;
            let mut td = p.clone();
            for l in (0..top).rev() {
                let up = g.tape.upsample_nearest(td[l + 1], 2)?;
                let sum = g.tape.add(p[l], up)?;
                td[l] = td_convs[l].forward(g, sum)?;
            }
            let mut out = td.clone();
            for l in 1..self.levels {
                let down = g.tape.avg_pool2d(out[l - 1], 2, 2, 0)?;
                let sum = g.tape.add(td[l], down)?;
                out[l] = bu_convs[l - 1].forward(g, sum)?;
            }
            p = out;
        }
        Ok(p)
    }
}
