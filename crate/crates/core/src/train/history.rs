use std::fmt::Write as _;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Validation accuracy; absent for contrastive pretraining.
    pub val_acc: Vec<Option<f64>>,
    /// Validation loss before the first update.
    pub initial_val_loss: f64,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.val_loss.len()
    }

    pub fn best_val_loss(&self) -> f64 {
        self.val_loss.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn push(&mut self, train_loss: f64, val_loss: f64, val_acc: Option<f64>) {
        self.train_loss.push(train_loss);
        self.val_loss.push(val_loss);
        self.val_acc.push(val_acc);
    }

    /// `epoch,train_loss,val_loss,val_acc`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_acc\n");
        for i in 0..self.epochs() {
            let acc = self.val_acc[i].map(|a| a.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{}", i + 1, self.train_loss[i], self.val_loss[i], acc).unwrap();
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops once the last `patience` epochs all failed to strictly improve on
/// the best validation loss seen before them.
pub fn early_stopping(val_losses: &[f64], patience: usize) -> StopDecision {
    let mut best = f64::INFINITY;
    let mut since = 0;
    for &v in val_losses {
        if v < best {
            best = v;
            since = 0;
        } else {
            since += 1;
        }
    }
    if since >= patience {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    }
}
