//! Named-parameter traversal plus the checkpoint directory format
//! (`manifest.txt` of `name dim...` lines next to one `RAMMTEN1` file per tensor).

use std::fs;
use std::path::Path;

use crate::error::{RammError, Result};
use crate::tensor::{read_tensor, write_tensor, Real, Tensor};

pub trait Params<T: Real> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Real> Params<T> for Tensor<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(prefix.to_string(), self);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        f(prefix.to_string(), self);
    }
}

impl<T: Real, P: Params<T>> Params<T> for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Implement [`Params`] for a struct generic over `T` by listing its parameter fields.
macro_rules! impl_params {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::tensor::Real> $crate::model::params::Params<T> for $ty<T> {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(String, &'a $crate::tensor::Tensor<T>),
            ) {
                $( self.$field.visit(&$crate::model::params::join(prefix, stringify!($field)), f); )*
            }

            fn visit_mut<'a>(
                &'a mut self,
                prefix: &str,
                f: &mut dyn FnMut(String, &'a mut $crate::tensor::Tensor<T>),
            ) {
                $( self.$field.visit_mut(&$crate::model::params::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use impl_params;

pub fn named<T: Real, P: Params<T>>(p: &P) -> Vec<(String, &Tensor<T>)> {
    let mut out = Vec::new();
    p.visit("", &mut |n, t| out.push((n, t)));
    out
}

pub fn named_mut<T: Real, P: Params<T>>(p: &mut P) -> Vec<(String, &mut Tensor<T>)> {
    let mut out = Vec::new();
    p.visit_mut("", &mut |n, t| out.push((n, t)));
    out
}

pub fn param_count<T: Real, P: Params<T>>(p: &P) -> usize {
    named(p).iter().map(|(_, t)| t.len()).sum()
}

pub fn zero_params<T: Real, P: Params<T>>(p: &mut P) {
    p.visit_mut("", &mut |_, t| t.fill(T::zero()));
}

pub fn zeros_like<T: Real, P: Params<T> + Clone>(p: &P) -> P {
    let mut z = p.clone();
    zero_params(&mut z);
    z
}

fn check_same_structure<T: Real>(a: &[(String, &Tensor<T>)], b: &[(String, &Tensor<T>)]) -> Result<()> {
    if a.len() != b.len() {
        return Err(RammError::Structure(format!(
            "{} tensors vs {} tensors",
            a.len(),
            b.len()
        )));
    }
    for ((na, ta), (nb, tb)) in a.iter().zip(b) {
        if na != nb || ta.shape() != tb.shape() {
            return Err(RammError::Structure(format!(
                "{na} {:?} vs {nb} {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
    }
    Ok(())
}

/// `acc += alpha * other`, tensor by tensor.
pub fn axpy_params<T: Real, P: Params<T>>(acc: &mut P, alpha: T, other: &P) -> Result<()> {
    let src = named(other);
    let mut dst = named_mut(acc);
    if src.len() != dst.len() {
        return Err(RammError::Structure("parameter count differs".into()));
    }
    for ((nd, d), (ns, s)) in dst.iter_mut().zip(&src) {
        if nd != ns {
            return Err(RammError::Structure(format!("{nd} vs {ns}")));
        }
        d.axpy(alpha, s)?;
    }
    Ok(())
}

pub fn scale_params<T: Real, P: Params<T>>(p: &mut P, s: T) {
    p.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|x| *x *= s));
}

pub fn flatten<T: Real, P: Params<T>>(p: &P) -> Vec<T> {
    let mut out = Vec::new();
    p.visit("", &mut |_, t| out.extend_from_slice(t.data()));
    out
}

pub fn unflatten<T: Real, P: Params<T>>(p: &mut P, values: &[T]) -> Result<()> {
    let mut at = 0;
    let mut short = false;
    p.visit_mut("", &mut |_, t| {
        let n = t.len();
        if at + n > values.len() {
            short = true;
            return;
        }
        t.data_mut().copy_from_slice(&values[at..at + n]);
        at += n;
    });
    if short || at != values.len() {
        return Err(RammError::Structure(format!(
            "flat vector of {} values does not match parameter count",
            values.len()
        )));
    }
    Ok(())
}

/// Copy every tensor of `src` into `dst`; both must have identical manifests.
pub fn copy_params<T: Real, P: Params<T>>(dst: &mut P, src: &P) -> Result<()> {
    let s = named(src);
    let mut d = named_mut(dst);
    if s.len() != d.len() {
        return Err(RammError::Structure("parameter count differs".into()));
    }
    for ((nd, td), (ns, ts)) in d.iter_mut().zip(&s) {
        if nd != ns || td.shape() != ts.shape() {
            return Err(RammError::Structure(format!("{nd} vs {ns}")));
        }
        td.data_mut().copy_from_slice(ts.data());
    }
    Ok(())
}

pub fn same_structure<T: Real, P: Params<T>>(a: &P, b: &P) -> Result<()> {
    check_same_structure(&named(a), &named(b))
}

pub fn manifest<T: Real, P: Params<T>>(p: &P) -> String {
    let mut s = String::new();
    for (name, t) in named(p) {
        s.push_str(&name);
        for d in t.shape() {
            s.push(' ');
            s.push_str(&d.to_string());
        }
        s.push('\n');
    }
    s
}

/// Write every tensor as `<dir>/<name>.ten` plus `manifest.txt`.
pub fn save_params<T: Real, P: Params<T>>(p: &P, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, t) in named(p) {
        write_tensor(dir.join(format!("{name}.ten")), t)?;
    }
    fs::write(dir.join("manifest.txt"), manifest(p))?;
    Ok(())
}

/// Load tensors into an already-shaped parameter set; the manifest must
/// list exactly the same names and shapes.
pub fn load_params<T: Real, P: Params<T>>(p: &mut P, dir: &Path) -> Result<()> {
    let mpath = dir.join("manifest.txt");
    let text = fs::read_to_string(&mpath).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => RammError::MissingArtifact(mpath.clone()),
        _ => e.into(),
    })?;
    let expected = manifest(p);
    if text != expected {
        let first_diff = text
            .lines()
            .zip(expected.lines())
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("file has `{a}`, model expects `{b}`"))
            .unwrap_or_else(|| "tensor count differs".to_string());
        return Err(RammError::Structure(first_diff));
    }
    let mut result = Ok(());
    p.visit_mut("", &mut |name, t| {
        if result.is_err() {
            return;
        }
        result = read_tensor(dir.join(format!("{name}.ten"))).map(|loaded| {
            let loaded: Tensor<T> = loaded.into_precision();
            t.data_mut().copy_from_slice(loaded.data());
        });
    });
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug, PartialEq)]
    struct Pair<T> {
        a: Tensor<T>,
        b: Vec<Tensor<T>>,
    }
    impl_params!(Pair { a, b });

    fn sample() -> Pair<f64> {
        Pair {
            a: Tensor::from_fn(&[2, 2], |i| i as f64),
            b: vec![Tensor::vector(vec![5.0]), Tensor::vector(vec![6.0, 7.0])],
        }
    }

    #[test]
    fn names_and_flatten() {
        let p = sample();
        let names: Vec<String> = named(&p).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["a", "b.0", "b.1"]);
        assert_eq!(param_count(&p), 7);
        let flat = flatten(&p);
        let mut q = zeros_like(&p);
        unflatten(&mut q, &flat).unwrap();
        assert_eq!(p, q);
        assert!(unflatten(&mut q, &flat[1..]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = sample();
        save_params(&p, dir.path()).unwrap();
        assert_eq!(
            std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap(),
            "a 2 2\nb.0 1\nb.1 2\n"
        );
        let mut q = zeros_like(&p);
        load_params(&mut q, dir.path()).unwrap();
        assert_eq!(p, q);

        let mut wrong = Pair {
            a: Tensor::<f64>::zeros(&[2, 3]),
            b: vec![],
        };
        assert!(matches!(
            load_params(&mut wrong, dir.path()),
            Err(RammError::Structure(_))
        ));
    }
}
