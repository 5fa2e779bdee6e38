pub mod egovel;
pub mod geometry;
pub mod identifiability;
pub mod io;
pub mod linalg;
pub mod pipeline;
pub mod residuals;
pub mod sim;
pub mod solver;
pub mod spline;
