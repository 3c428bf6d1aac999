pub mod appearance;
pub mod attention;
pub mod evalsim;
pub mod gradsuite;
pub mod image;
pub mod mtt;
pub mod numerics;
pub mod pipeline;
