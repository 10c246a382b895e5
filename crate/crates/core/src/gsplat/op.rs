use super::raster::{render, render_backward, Camera, RenderSettings, RenderState};
use super::GaussianScene;
use crate::geometry::{Intrinsics, Mat3, PoseSE3, Vec3};
use crate::tensor::{CustomOp, Result, Tape, Tensor, TensorError, Var};

struct RenderOp {
    scene: GaussianScene,
    state: RenderState,
}

fn err(msg: impl std::fmt::Display) -> TensorError {
    TensorError::InvalidArgument {
        op: "render",
        msg: msg.to_string(),
    }
}

impl CustomOp for RenderOp {
    fn name(&self) -> &'static str {
        "render"
    }

    fn backward(
        &self,
        grad_out: &Tensor,
        _inputs: &[&Tensor],
        _output: &Tensor,
    ) -> Result<Vec<Option<Tensor>>> {
        let (g, p) = render_backward(&self.scene, &self.state, grad_out.data()).map_err(err)?;
        let n = self.scene.len();
        let flat3 = |v: &[[f64; 3]]| v.iter().flatten().copied().collect::<Vec<_>>();
        let mut rot = Vec::with_capacity(9);
        for r in 0..3 {
            for c in 0..3 {
                rot.push(p.rot[(r, c)]);
            }
        }
        Ok(vec![
            Some(Tensor::new([n, 3], flat3(&g.mu))?),
            Some(Tensor::new(
                [n, 4],
                g.quat.iter().flatten().copied().collect(),
            )?),
            Some(Tensor::new([n, 3], flat3(&g.scale))?),
            Some(Tensor::new([n], g.opacity)?),
            Some(Tensor::new([n, self.scene.sh_dim()], g.sh)?),
            Some(Tensor::new([3, 3], rot)?),
            Some(Tensor::new([3], vec![p.trans.x, p.trans.y, p.trans.z])?),
        ])
    }
}

fn rows<const K: usize>(t: &Tensor) -> Vec<[f64; K]> {
    t.data()
        .chunks_exact(K)
        .map(|c| c.try_into().expect("chunk"))
        .collect()
}

/// Differentiable render of Gaussians given as tape variables:
/// `mu [n,3]`, `quat [n,4]`, `scale [n,3]`, `opacity [n]`, `sh [n,3K]`,
/// `rot [3,3]`, `trans [3]`. Returns an `[H, W, 3]` image.
#[allow(clippy::too_many_arguments)]
pub fn render_on_tape(
    tape: &mut Tape,
    sh_degree: usize,
    mu: Var,
    quat: Var,
    scale: Var,
    opacity: Var,
    sh: Var,
    rot: Var,
    trans: Var,
    k: &Intrinsics,
    settings: &RenderSettings,
) -> Result<Var> {
    let n = tape.shape(mu).first().copied().unwrap_or(0);
    let shd = 3 * super::sh::num_coeffs(sh_degree);
    let expect: [(&str, Var, Vec<usize>); 7] = [
        ("mu", mu, vec![n, 3]),
        ("quat", quat, vec![n, 4]),
        ("scale", scale, vec![n, 3]),
        ("opacity", opacity, vec![n]),
        ("sh", sh, vec![n, shd]),
        ("rot", rot, vec![3, 3]),
        ("trans", trans, vec![3]),
    ];
    for (name, v, shape) in &expect {
        if tape.shape(*v) != shape.as_slice() {
            return Err(err(format!(
                "{name} has shape {:?}, expected {shape:?}",
                tape.shape(*v)
            )));
        }
    }
    let scene = GaussianScene {
        sh_degree,
        mu: rows::<3>(tape.value(mu)),
        quat: rows::<4>(tape.value(quat)),
        scale: rows::<3>(tape.value(scale)),
        opacity: tape.value(opacity).data().to_vec(),
        sh: tape.value(sh).data().to_vec(),
    };
    let r = tape.value(rot).data();
    let t = tape.value(trans).data();
    let pose = PoseSE3::new(Mat3::from_row_slice(r), Vec3::new(t[0], t[1], t[2]));
    let cam = Camera { k: *k, pose };
    let (out, state) = render(&scene, &cam, settings).map_err(err)?;
    let image = Tensor::new([k.height, k.width, 3], out.color)?;
    tape.custom(
        &[mu, quat, scale, opacity, sh, rot, trans],
        image,
        Box::new(RenderOp { scene, state }),
    )
}
