pub mod evalkit;
pub mod geometry;
pub mod gradsuite;
pub mod gsplat;
pub mod losses;
pub mod netcore;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
