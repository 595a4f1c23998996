//! Structure-preserving hybridized finite elements for linear wave-type
//! port-Hamiltonian systems on tetrahedral meshes.

// Quadrature nodes and reference matrices are stored with the full
// precision of the generator that produced them.
#![allow(clippy::excessive_precision)]

use thiserror::Error as ThisError;

// Every code block in the guide compiles and runs under `cargo test --doc`.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }
    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(meshes, "../../../book/src/meshes.md");
    chapter!(elements, "../../../book/src/elements.md");
    chapter!(systems, "../../../book/src/systems.md");
    chapter!(stepping, "../../../book/src/stepping.md");
    chapter!(verification, "../../../book/src/verification.md");
    chapter!(cli_guide, "../../../book/src/cli.md");
}

pub mod assembly;
pub mod cli;
pub mod diagnostics;
pub mod elements;
pub mod mesh;
pub mod physystem;
pub mod problems;
pub mod solver;

/// Errors produced by mesh construction, assembly, and solvers.
#[derive(Debug, ThisError)]
pub enum Error {
    /// A mesh failed a structural consistency requirement.
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    /// An operator or local block could not be factorized.
    #[error("singular system: {0}")]
    Singular(String),
    /// Invalid run or problem configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Failure writing diagnostics or reports.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
