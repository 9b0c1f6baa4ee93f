//! Forward evaluation and reverse-mode gradients of the denoiser.

use super::ops::{
    adaptive_max_pool_backward, adaptive_max_pool_global, conv3d, conv3d_backward, modulate,
    modulate_backward, relu, relu_backward, sigmoid,
};
use super::params::{Cab, ModelParams};
use super::scalar::Scalar;
use super::NetError;
use crate::volgrid::Dims;

/// Per-channel scale and shift produced by the embedding layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NleVector<T> {
    pub scale: Vec<T>,
    pub shift: Vec<T>,
}

impl<T: Scalar> NleVector<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: vec![T::one(); channels],
            shift: vec![T::zero(); channels],
        }
    }
}

/// How the attention descriptors are conditioned.
#[derive(Debug, Clone, PartialEq)]
pub enum NleInput<T> {
    /// Run the embedding layer on this scalar.
    Scalar(T),
    /// Ablation: no embedding, identity modulation.
    Disabled,
    /// Use a fixed modulation vector.
    Fixed(NleVector<T>),
}

impl<T: Scalar> NleInput<T> {
    pub fn from_flag(use_nle: bool, s: T) -> Self {
        if use_nle {
            NleInput::Scalar(s)
        } else {
            NleInput::Disabled
        }
    }
}

struct NleTrace<T> {
    s: T,
    pre: Vec<T>,
    hidden: Vec<T>,
}

fn nle_eval<T: Scalar>(
    s: T,
    params: &ModelParams<T>,
) -> Result<(NleVector<T>, NleTrace<T>), NetError> {
    if !s.is_finite() {
        return Err(NetError::Domain(format!(
            "embedding scalar {s:?} is not finite"
        )));
    }
    let c = params.config.channels;
    let pre = params.nle.affine1.forward(&[s]);
    let hidden = relu(&pre);
    let mut out = params.nle.affine2.forward(&hidden);
    let shift = out.split_off(c);
    Ok((NleVector { scale: out, shift }, NleTrace { s, pre, hidden }))
}

/// `h = relu(affine1(s))`, `[scale | shift] = affine2(h)`.
pub fn nle_forward<T: Scalar>(s: T, params: &ModelParams<T>) -> Result<NleVector<T>, NetError> {
    nle_eval(s, params).map(|(v, _)| v)
}

struct CabTrace<T> {
    x: Vec<T>,
    h1: Vec<T>,
    r1: Vec<T>,
    u: Vec<T>,
    pooled: Vec<T>,
    argmax: Vec<usize>,
    modulated: Vec<T>,
    z1: Vec<T>,
    r2: Vec<T>,
    gate: Vec<T>,
}

fn cab_eval<T: Scalar>(
    x: Vec<T>,
    dims: Dims,
    nle: Option<&NleVector<T>>,
    cab: &Cab<T>,
) -> Result<(Vec<T>, CabTrace<T>), NetError> {
    let c = cab.conv1.cout;
    let n = dims[0] * dims[1] * dims[2];
    let h1 = conv3d(&x, dims, &cab.conv1)?;
    let r1 = relu(&h1);
    let u = conv3d(&r1, dims, &cab.conv2)?;
    let (pooled, argmax) = adaptive_max_pool_global(&u, c);
    let modulated = match nle {
        Some(v) => modulate(&pooled, &v.scale, &v.shift)?,
        None => pooled.clone(),
    };
    let z1 = cab.reduce.forward(&modulated);
    let r2 = relu(&z1);
    let gate: Vec<T> = cab.expand.forward(&r2).into_iter().map(sigmoid).collect();
    let mut out = x.clone();
    for ch in 0..c {
        let a = gate[ch];
        for (o, &uv) in out[ch * n..(ch + 1) * n]
            .iter_mut()
            .zip(&u[ch * n..(ch + 1) * n])
        {
            *o = *o + uv * a;
        }
    }
    Ok((
        out,
        CabTrace {
            x,
            h1,
            r1,
            u,
            pooled,
            argmax,
            modulated,
            z1,
            r2,
            gate,
        },
    ))
}

/// Channel attention block: `x + u ⊙ sigmoid(expand(relu(reduce(modulate(maxpool(u))))))`
/// with `u = conv2(relu(conv1(x)))`. `nle = None` bypasses the modulation.
pub fn cab_forward<T: Scalar>(
    x: &[T],
    dims: Dims,
    nle: Option<&NleVector<T>>,
    cab: &Cab<T>,
) -> Result<Vec<T>, NetError> {
    cab_eval(x.to_vec(), dims, nle, cab).map(|(o, _)| o)
}

struct OrbTrace<T> {
    cabs: Vec<CabTrace<T>>,
    tail_in: Vec<T>,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct Trace<T> {
    dims: Dims,
    patch: Vec<T>,
    orbs: Vec<OrbTrace<T>>,
    features: Vec<T>,
    nle: Option<NleTrace<T>>,
    nle_vec: NleVector<T>,
}

fn check_patch<T>(patch: &[T], dims: Dims) -> Result<(), NetError> {
    if dims.iter().any(|&d| d < 3) {
        return Err(NetError::Shape(format!("patch dims {dims:?} must be >= 3")));
    }
    if patch.len() != dims[0] * dims[1] * dims[2] {
        return Err(NetError::Shape(format!(
            "patch length {} does not match {dims:?}",
            patch.len()
        )));
    }
    Ok(())
}

fn forward_impl<T: Scalar>(
    patch: &[T],
    dims: Dims,
    nle_in: &NleInput<T>,
    params: &ModelParams<T>,
    record: bool,
) -> Result<(Vec<T>, Option<Trace<T>>), NetError> {
    check_patch(patch, dims)?;
    let c = params.config.channels;
    let (nle_vec, nle_trace) = match nle_in {
        NleInput::Scalar(s) => {
            let (v, t) = nle_eval(*s, params)?;
            (v, Some(t))
        }
        NleInput::Disabled => (NleVector::identity(c), None),
        NleInput::Fixed(v) => {
            if v.scale.len() != c || v.shift.len() != c {
                return Err(NetError::Shape("fixed modulation has wrong length".into()));
            }
            (v.clone(), None)
        }
    };
    let mut f = conv3d(patch, dims, &params.head)?;
    let mut orb_traces = Vec::new();
    for orb in &params.orbs {
        let input = f;
        let mut g = input.clone();
        let mut cab_traces = Vec::new();
        for cab in &orb.cabs {
            let (out, t) = cab_eval(g, dims, Some(&nle_vec), cab)?;
            g = out;
            if record {
                cab_traces.push(t);
            }
        }
        let mut out = conv3d(&g, dims, &orb.tail)?;
        for (o, &i) in out.iter_mut().zip(&input) {
            *o = *o + i;
        }
        if record {
            orb_traces.push(OrbTrace {
                cabs: cab_traces,
                tail_in: g,
            });
        }
        f = out;
    }
    let residual = conv3d(&f, dims, &params.tail)?;
    let out: Vec<T> = patch.iter().zip(&residual).map(|(&p, &r)| p + r).collect();
    let trace = record.then(|| Trace {
        dims,
        patch: patch.to_vec(),
        orbs: orb_traces,
        features: f,
        nle: nle_trace,
        nle_vec,
    });
    Ok((out, trace))
}

/// Denoised patch: `patch + tail(ORBs(head(patch)))`, every CAB conditioned
/// by the shared embedding.
pub fn orsnet_forward<T: Scalar>(
    patch: &[T],
    dims: Dims,
    nle: &NleInput<T>,
    params: &ModelParams<T>,
) -> Result<Vec<T>, NetError> {
    forward_impl(patch, dims, nle, params, false).map(|(o, _)| o)
}

/// Parameter gradients plus gradients with respect to the inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub params: ModelParams<T>,
    pub d_scalar: T,
    pub d_input: Vec<T>,
}

fn cab_backward<T: Scalar>(
    t: &CabTrace<T>,
    dims: Dims,
    cab: &Cab<T>,
    nle: &NleVector<T>,
    dout: &[T],
    grad: &mut Cab<T>,
    d_nle: &mut NleVector<T>,
) -> Vec<T> {
    let c = cab.conv1.cout;
    let n = dims[0] * dims[1] * dims[2];
    let mut du = vec![T::zero(); c * n];
    let mut dgate = vec![T::zero(); c];
    for ch in 0..c {
        let a = t.gate[ch];
        let mut acc = T::zero();
        for i in ch * n..(ch + 1) * n {
            du[i] = dout[i] * a;
            acc = acc + dout[i] * t.u[i];
        }
        dgate[ch] = acc;
    }
    let dz2: Vec<T> = dgate
        .iter()
        .zip(&t.gate)
        .map(|(&g, &a)| g * a * (T::one() - a))
        .collect();
    let dr2 = cab.expand.backward(&t.r2, &dz2, &mut grad.expand);
    let dz1 = relu_backward(&t.z1, &dr2);
    let dmod = cab.reduce.backward(&t.modulated, &dz1, &mut grad.reduce);
    let (dpooled, dscale, dshift) = modulate_backward(&t.pooled, &nle.scale, &dmod);
    for ch in 0..c {
        d_nle.scale[ch] = d_nle.scale[ch] + dscale[ch];
        d_nle.shift[ch] = d_nle.shift[ch] + dshift[ch];
    }
    adaptive_max_pool_backward(&dpooled, &t.argmax, n, &mut du);
    let dr1 = conv3d_backward(&t.r1, dims, &cab.conv2, &du, &mut grad.conv2, true).unwrap();
    let dh1 = relu_backward(&t.h1, &dr1);
    let dx_conv = conv3d_backward(&t.x, dims, &cab.conv1, &dh1, &mut grad.conv1, true).unwrap();
    dout.iter().zip(&dx_conv).map(|(&a, &b)| a + b).collect()
}

/// Reverse pass through a recorded trace.
pub fn backward_trace<T: Scalar>(
    trace: &Trace<T>,
    params: &ModelParams<T>,
    grad_out: &[T],
) -> Result<Gradients<T>, NetError> {
    if grad_out.len() != trace.patch.len() {
        return Err(NetError::Shape(format!(
            "output gradient length {} does not match patch length {}",
            grad_out.len(),
            trace.patch.len()
        )));
    }
    let dims = trace.dims;
    let c = params.config.channels;
    let mut grads = params.zeros_like();
    let mut d_nle = NleVector {
        scale: vec![T::zero(); c],
        shift: vec![T::zero(); c],
    };
    let mut d_input = grad_out.to_vec();
    let mut df = conv3d_backward(
        &trace.features,
        dims,
        &params.tail,
        grad_out,
        &mut grads.tail,
        true,
    )
    .unwrap();
    for (oi, orb) in params.orbs.iter().enumerate().rev() {
        let ot = &trace.orbs[oi];
        let gorb = &mut grads.orbs[oi];
        let mut dg =
            conv3d_backward(&ot.tail_in, dims, &orb.tail, &df, &mut gorb.tail, true).unwrap();
        for (ci, cab) in orb.cabs.iter().enumerate().rev() {
            dg = cab_backward(
                &ot.cabs[ci],
                dims,
                cab,
                &trace.nle_vec,
                &dg,
                &mut gorb.cabs[ci],
                &mut d_nle,
            );
        }
        // skip connection
        for (a, &b) in dg.iter_mut().zip(&df) {
            *a = *a + b;
        }
        df = dg;
    }
    let dpatch =
        conv3d_backward(&trace.patch, dims, &params.head, &df, &mut grads.head, true).unwrap();
    for (a, &b) in d_input.iter_mut().zip(&dpatch) {
        *a = *a + b;
    }
    let mut d_scalar = T::zero();
    if let Some(nt) = &trace.nle {
        let mut dout = d_nle.scale.clone();
        dout.extend_from_slice(&d_nle.shift);
        let dh = params
            .nle
            .affine2
            .backward(&nt.hidden, &dout, &mut grads.nle.affine2);
        let dpre = relu_backward(&nt.pre, &dh);
        let ds = params
            .nle
            .affine1
            .backward(&[nt.s], &dpre, &mut grads.nle.affine1);
        d_scalar = ds[0];
    }
    Ok(Gradients {
        params: grads,
        d_scalar,
        d_input,
    })
}

/// Records a forward pass so that [`GradSession::backward`] can be called.
pub struct GradSession<T> {
    trace: Option<Trace<T>>,
}

impl<T: Scalar> Default for GradSession<T> {
    fn default() -> Self {
        Self { trace: None }
    }
}

impl<T: Scalar> GradSession<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(
        &mut self,
        patch: &[T],
        dims: Dims,
        nle: &NleInput<T>,
        params: &ModelParams<T>,
    ) -> Result<Vec<T>, NetError> {
        let (out, trace) = forward_impl(patch, dims, nle, params, true)?;
        self.trace = trace;
        Ok(out)
    }

    /// Gradients of the recorded pass given `dL/doutput`. The recording is kept,
    /// so repeated calls return identical results.
    pub fn backward(
        &self,
        params: &ModelParams<T>,
        grad_out: &[T],
    ) -> Result<Gradients<T>, NetError> {
        let trace = self
            .trace
            .as_ref()
            .ok_or_else(|| NetError::State("backward called before forward".into()))?;
        backward_trace(trace, params, grad_out)
    }
}
