//! Architecture perturbation: the mutation operator and the transfer seeder.
//!
//! For every block, one of the five primitives is chosen uniformly and
//! replaced by a uniform draw from its legal values (which may equal the old
//! value). A perturbed genome that violates the scale constraints is thrown
//! away and the whole perturbation is redrawn.

use rand::Rng;

use crate::error::{Error, Result};
use crate::search_space::{is_valid, ArchCode, Primitive, SearchSpaceConfig};

/// Maximum number of whole-genome redraws in [`perturb`].
pub const PERTURB_RETRIES: usize = 1_000;

/// Retry bound for seeding from an architecture that violates the target
/// space.
pub const CROSS_SPACE_RETRIES: usize = 100_000;

/// One unconstrained perturbation pass. Returns the perturbed architecture
/// and the primitive chosen in each block.
pub fn perturb_once<R: Rng + ?Sized>(basic: &ArchCode, rng: &mut R) -> (ArchCode, Vec<Primitive>) {
    let mut out = basic.clone();
    let mut chosen = Vec::with_capacity(out.len());
    for block in &mut out.blocks {
        let prim = Primitive::ALL[rng.random_range(0..Primitive::ALL.len())];
        let value = rng.random_range(0..prim.cardinality());
        *block = block.with_value(prim, value);
        chosen.push(prim);
    }
    (out, chosen)
}

/// Perturbs `basic` until the result satisfies the scale constraints of
/// `space`.
///
/// `basic` itself need not satisfy them: an architecture found under a
/// different constraint window is adapted by retrying.
pub fn perturb<R: Rng + ?Sized>(basic: &ArchCode, space: &SearchSpaceConfig, rng: &mut R) -> Result<ArchCode> {
    perturb_with_retries(basic, space, rng, PERTURB_RETRIES)
}

pub fn perturb_with_retries<R: Rng + ?Sized>(
    basic: &ArchCode,
    space: &SearchSpaceConfig,
    rng: &mut R,
    retries: usize,
) -> Result<ArchCode> {
    if basic.len() != space.n_blocks {
        return Err(Error::Config(format!(
            "architecture has {} blocks, search space expects {}",
            basic.len(),
            space.n_blocks
        )));
    }
    for _ in 0..retries {
        let (candidate, _) = perturb_once(basic, rng);
        if is_valid(&candidate, space) {
            return Ok(candidate);
        }
    }
    Err(Error::ConstraintUnsatisfiable { attempts: retries })
}

/// Evolution's mutation operator; identical to [`perturb`].
pub fn mutate<R: Rng + ?Sized>(parent: &ArchCode, space: &SearchSpaceConfig, rng: &mut R) -> Result<ArchCode> {
    let child = perturb(parent, space, rng)?;
    log::trace!("mutate: {parent} -> {child}");
    Ok(child)
}

/// Builds an initial population of `size` perturbations of `basic`.
///
/// With `include_seed_verbatim`, the first member is `basic` itself (it must then
/// satisfy `space`) and the remaining `size - 1` are perturbations.
pub fn seed_population<R: Rng + ?Sized>(
    basic: &ArchCode,
    size: usize,
    space: &SearchSpaceConfig,
    include_seed_verbatim: bool,
    rng: &mut R,
) -> Result<Vec<ArchCode>> {
    let mut out = Vec::with_capacity(size);
    if include_seed_verbatim && size > 0 {
        if !is_valid(basic, space) {
            return Err(Error::Config(
                "basic architecture violates the target search space and cannot be included verbatim".into(),
            ));
        }
        out.push(basic.clone());
    }
    // a basic from another space may need many draws to land in this one
    let retries = if is_valid(basic, space) {
        PERTURB_RETRIES
    } else {
        CROSS_SPACE_RETRIES
    };
    while out.len() < size {
        out.push(perturb_with_retries(basic, space, rng, retries)?);
    }
    Ok(out)
}
