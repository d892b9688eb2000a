use crate::scaler::{Executor, Monitor, Scaler, ScalerError};

/// Never changes anything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoneScaler;

impl Scaler for NoneScaler {
    fn scale(&mut self, _: &Monitor<'_>, _: &mut Executor<'_>) -> Result<(), ScalerError> {
        Ok(())
    }
}
