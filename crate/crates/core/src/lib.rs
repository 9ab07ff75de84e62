pub mod data;
pub mod model;
pub mod optim;
pub mod pinv;
pub mod seed;
pub mod tape;
pub mod train;
pub mod tensor;
pub mod transform;
