pub mod cli;
pub mod diagnostics;
pub mod expansion;
pub mod higher_order;
pub mod io;
pub mod linalg;
pub mod model;
pub mod nature;
pub mod oracle;
pub mod solver;
