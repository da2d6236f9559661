//! The parameterized auction mechanism: allocation head (column-softmax over
//! n+1 rows per item), payment head (sigmoid fraction of the reported
//! allocated value), and an optional shared trunk whose features feed the
//! shared-backbone regret estimator.
//!
//! Feasibility and reported-bid IR hold for every parameter setting by
//! construction: softmax columns sum to one, and payments are a fraction in
//! (0,1) of the reported allocated value.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::auction::{self, Allocation, AuctionConfig, AuctionOutcome, Payments, ValuationProfile};
use crate::error::{Error, Result};
use crate::nn::{BatchCache, DenseNet, OutputActivation};
use crate::scalar::Scalar;
use crate::seeding;

/// Network shape of the mechanism.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub n_hidden_layers: usize,
    pub hidden_size: usize,
    /// Whether allocation and payment share a trunk whose features are
    /// exported for the shared-backbone estimator.
    pub shared_trunk: bool,
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        Self {
            n_hidden_layers: 5,
            hidden_size: 100,
            shared_trunk: false,
        }
    }
}

impl ArchitectureSpec {
    /// Hidden layers assigned to the trunk when shared: the first 3 of the
    /// stack (fewer for shallow networks, always leaving one head layer).
    pub fn trunk_layers(&self) -> usize {
        self.n_hidden_layers.saturating_sub(1).min(3).max(1)
    }
}

/// Trainable mechanism parameters for an `n x m` auction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismParams<T> {
    pub n_bidders: usize,
    pub n_items: usize,
    pub spec: ArchitectureSpec,
    /// Present iff `spec.shared_trunk`.
    pub trunk: Option<DenseNet<T>>,
    pub allocation_net: DenseNet<T>,
    pub payment_net: DenseNet<T>,
}

/// Forward caches for one batch, reused by every gradient path.
pub struct MechanismForward<T> {
    pub trunk_cache: Option<BatchCache<T>>,
    pub alloc_cache: BatchCache<T>,
    pub payment_cache: BatchCache<T>,
}

impl<T: Scalar> MechanismForward<T> {
    /// (B, (n+1)*m) softmax shares.
    pub fn shares(&self) -> &Array2<T> {
        self.alloc_cache.output()
    }

    /// (B, n) sigmoid payment fractions.
    pub fn fractions(&self) -> &Array2<T> {
        self.payment_cache.output()
    }
}

impl<T: Scalar> MechanismParams<T> {
    pub fn init(auction: &AuctionConfig, spec: ArchitectureSpec, seed: u64) -> Self {
        let (n, m) = (auction.n_bidders, auction.n_items);
        let input = n * m;
        let h = spec.hidden_size;
        let alloc_out = (n + 1) * m;
        let softmax = OutputActivation::ColumnSoftmax { rows: n + 1, cols: m };
        let hidden = |count: usize| std::iter::repeat(h).take(count);

        if spec.shared_trunk {
            let trunk_hidden = spec.trunk_layers();
            let head_hidden = spec.n_hidden_layers - trunk_hidden;
            let trunk_sizes: Vec<usize> =
                std::iter::once(input).chain(hidden(trunk_hidden)).collect();
            let trunk = DenseNet::init(
                &trunk_sizes,
                OutputActivation::Relu,
                seeding::subseed(seed, &[0]),
            );
            let alloc_sizes: Vec<usize> = std::iter::once(h)
                .chain(hidden(head_hidden))
                .chain(std::iter::once(alloc_out))
                .collect();
            let pay_sizes: Vec<usize> = std::iter::once(h)
                .chain(hidden(head_hidden))
                .chain(std::iter::once(n))
                .collect();
            Self {
                n_bidders: n,
                n_items: m,
                spec,
                trunk: Some(trunk),
                allocation_net: DenseNet::init(&alloc_sizes, softmax, seeding::subseed(seed, &[1])),
                payment_net: DenseNet::init(
                    &pay_sizes,
                    OutputActivation::Sigmoid,
                    seeding::subseed(seed, &[2]),
                ),
            }
        } else {
            let alloc_sizes: Vec<usize> = std::iter::once(input)
                .chain(hidden(spec.n_hidden_layers))
                .chain(std::iter::once(alloc_out))
                .collect();
            let pay_sizes: Vec<usize> = std::iter::once(input)
                .chain(hidden(spec.n_hidden_layers))
                .chain(std::iter::once(n))
                .collect();
            Self {
                n_bidders: n,
                n_items: m,
                spec,
                trunk: None,
                allocation_net: DenseNet::init(&alloc_sizes, softmax, seeding::subseed(seed, &[1])),
                payment_net: DenseNet::init(
                    &pay_sizes,
                    OutputActivation::Sigmoid,
                    seeding::subseed(seed, &[2]),
                ),
            }
        }
    }

    /// All-zero parameters: uniform shares and payment fraction 1/2.
    pub fn zeros(auction: &AuctionConfig, spec: ArchitectureSpec) -> Self {
        let mut params = Self::init(auction, spec, 0);
        for net in params
            .trunk
            .iter_mut()
            .chain([&mut params.allocation_net, &mut params.payment_net])
        {
            for w in net.weights.iter_mut() {
                w.fill(T::zero());
            }
            for b in net.biases.iter_mut() {
                b.fill(T::zero());
            }
        }
        params
    }

    pub fn input_width(&self) -> usize {
        self.n_bidders * self.n_items
    }

    /// Width of the exported backbone feature vector, when shared.
    pub fn feature_width(&self) -> Option<usize> {
        self.trunk.as_ref().map(|t| t.output_width())
    }

    fn check_bids(&self, bids: &ValuationProfile<T>) -> Result<()> {
        if bids.n_bidders() != self.n_bidders || bids.n_items() != self.n_items {
            return Err(Error::DimensionMismatch(format!(
                "mechanism is {}x{}, bids are {}x{}",
                self.n_bidders,
                self.n_items,
                bids.n_bidders(),
                bids.n_items()
            )));
        }
        Ok(())
    }

    /// Batched forward pass over flattened bid profiles `(B, n*m)`.
    pub fn forward_batch(&self, bids: ArrayView2<'_, T>) -> Result<MechanismForward<T>> {
        match &self.trunk {
            Some(trunk) => {
                let trunk_cache = trunk.forward_batch(bids)?;
                let features = trunk_cache.output().view();
                let alloc_cache = self.allocation_net.forward_batch(features)?;
                let payment_cache = self.payment_net.forward_batch(features)?;
                Ok(MechanismForward {
                    trunk_cache: Some(trunk_cache),
                    alloc_cache,
                    payment_cache,
                })
            }
            None => Ok(MechanismForward {
                trunk_cache: None,
                alloc_cache: self.allocation_net.forward_batch(bids)?,
                payment_cache: self.payment_net.forward_batch(bids)?,
            }),
        }
    }

    /// Backpropagates head cotangents to the flattened-bid inputs.
    ///
    /// `d_shares: (B, (n+1)m)`, `d_fractions: (B, n)`; returns `(B, n*m)`.
    pub fn input_grad_batch(
        &self,
        fwd: &MechanismForward<T>,
        d_shares: &Array2<T>,
        d_fractions: &Array2<T>,
    ) -> Result<Array2<T>> {
        let d_alloc_in = self
            .allocation_net
            .input_grad_batch(&fwd.alloc_cache, d_shares)?;
        let d_pay_in = self
            .payment_net
            .input_grad_batch(&fwd.payment_cache, d_fractions)?;
        let combined = d_alloc_in + d_pay_in;
        match (&self.trunk, &fwd.trunk_cache) {
            (Some(trunk), Some(cache)) => trunk.input_grad_batch(cache, &combined),
            (None, None) => Ok(combined),
            _ => Err(Error::DimensionMismatch(
                "forward cache does not match trunk configuration".into(),
            )),
        }
    }

    /// Column-softmax allocation for a single profile.
    pub fn allocate(&self, bids: &ValuationProfile<T>) -> Result<Allocation<T>> {
        self.check_bids(bids)?;
        let flat = bids.flatten();
        let fwd = self.forward_batch(flat.view().insert_axis(Axis(0)))?;
        Ok(self.shares_to_allocation(fwd.shares().row(0)))
    }

    fn shares_to_allocation(&self, flat_shares: ArrayView1<'_, T>) -> Allocation<T> {
        let (n, m) = (self.n_bidders, self.n_items);
        let shares = Array2::from_shape_fn((n + 1, m), |(r, j)| flat_shares[r * m + j]);
        Allocation::from_unchecked(shares)
    }

    fn fractions_to_payments(
        &self,
        bids: &ValuationProfile<T>,
        allocation: &Allocation<T>,
        fractions: ArrayView1<'_, T>,
    ) -> Payments<T> {
        let amounts = Array1::from_shape_fn(self.n_bidders, |i| {
            fractions[i] * bids.row(i).dot(&allocation.bidder_row(i))
        });
        Payments::from_unchecked(amounts)
    }

    /// Payments as sigmoid fractions of the reported allocated value, which
    /// makes reported-bid IR structural.
    pub fn payments(
        &self,
        bids: &ValuationProfile<T>,
        allocation: &Allocation<T>,
    ) -> Result<Payments<T>> {
        self.check_bids(bids)?;
        let flat = bids.flatten();
        let fwd = self.forward_batch(flat.view().insert_axis(Axis(0)))?;
        Ok(self.fractions_to_payments(bids, allocation, fwd.fractions().row(0)))
    }

    /// Composes allocation and payments; also returns the backbone features
    /// when the mechanism was built with a shared trunk.
    pub fn run_mechanism(
        &self,
        bids: &ValuationProfile<T>,
    ) -> Result<(AuctionOutcome<T>, Option<Array1<T>>)> {
        self.check_bids(bids)?;
        let flat = bids.flatten();
        let fwd = self.forward_batch(flat.view().insert_axis(Axis(0)))?;
        let allocation = self.shares_to_allocation(fwd.shares().row(0));
        let payments = self.fractions_to_payments(bids, &allocation, fwd.fractions().row(0));
        let features = fwd
            .trunk_cache
            .as_ref()
            .map(|c| c.output().row(0).to_owned());
        Ok((AuctionOutcome { allocation, payments }, features))
    }

    /// Backbone features for a batch of flattened bid profiles.
    pub fn features_batch(&self, bids: ArrayView2<'_, T>) -> Result<Array2<T>> {
        match &self.trunk {
            Some(trunk) => Ok(trunk.forward_batch(bids)?.output().clone()),
            None => Err(Error::Config(
                "mechanism has no shared trunk; backbone features unavailable".into(),
            )),
        }
    }

    /// Utility of each probing bidder and the exact gradient of that utility
    /// with respect to the bidder's own bid row, batched.
    ///
    /// Row `r` of `bids` is a full flattened profile in which bidder
    /// `bidders[r]` (with true values `true_values.row(r)`) is probing.
    pub fn utility_and_bid_grad_batch(
        &self,
        bids: ArrayView2<'_, T>,
        true_values: ArrayView2<'_, T>,
        bidders: &[usize],
    ) -> Result<(Array1<T>, Array2<T>)> {
        let batch = bids.nrows();
        if true_values.nrows() != batch || bidders.len() != batch {
            return Err(Error::DimensionMismatch(
                "bids, true_values and bidders must agree on batch size".into(),
            ));
        }
        let (n, m) = (self.n_bidders, self.n_items);
        let fwd = self.forward_batch(bids)?;
        let shares = fwd.shares();
        let fractions = fwd.fractions();

        let mut utilities = Array1::zeros(batch);
        let mut d_shares = Array2::zeros((batch, (n + 1) * m));
        let mut d_fractions = Array2::zeros((batch, n));
        for r in 0..batch {
            let i = bidders[r];
            let sigma = fractions[[r, i]];
            let mut allocated_value = T::zero();
            let mut reported_value = T::zero();
            for j in 0..m {
                let share = shares[[r, i * m + j]];
                allocated_value += true_values[[r, j]] * share;
                reported_value += bids[[r, i * m + j]] * share;
            }
            utilities[r] = allocated_value - sigma * reported_value;
            for j in 0..m {
                d_shares[[r, i * m + j]] = true_values[[r, j]] - sigma * bids[[r, i * m + j]];
            }
            d_fractions[[r, i]] = -reported_value;
        }

        let input_grad = self.input_grad_batch(&fwd, &d_shares, &d_fractions)?;

        // Own-bid slice of the input gradient plus the direct dependence of
        // the reported allocated value on the bid itself.
        let mut own_grad = Array2::zeros((batch, m));
        for r in 0..batch {
            let i = bidders[r];
            let sigma = fractions[[r, i]];
            for j in 0..m {
                own_grad[[r, j]] =
                    input_grad[[r, i * m + j]] - sigma * shares[[r, i * m + j]];
            }
        }
        Ok((utilities, own_grad))
    }

    /// Forward-only variant of [`Self::utility_and_bid_grad_batch`].
    pub fn utilities_batch(
        &self,
        bids: ArrayView2<'_, T>,
        true_values: ArrayView2<'_, T>,
        bidders: &[usize],
    ) -> Result<Array1<T>> {
        let batch = bids.nrows();
        if true_values.nrows() != batch || bidders.len() != batch {
            return Err(Error::DimensionMismatch(
                "bids, true_values and bidders must agree on batch size".into(),
            ));
        }
        let m = self.n_items;
        let fwd = self.forward_batch(bids)?;
        let shares = fwd.shares();
        let fractions = fwd.fractions();
        let mut utilities = Array1::zeros(batch);
        for r in 0..batch {
            let i = bidders[r];
            let sigma = fractions[[r, i]];
            let mut allocated_value = T::zero();
            let mut reported_value = T::zero();
            for j in 0..m {
                let share = shares[[r, i * m + j]];
                allocated_value += true_values[[r, j]] * share;
                reported_value += bids[[r, i * m + j]] * share;
            }
            utilities[r] = allocated_value - sigma * reported_value;
        }
        Ok(utilities)
    }

    /// Truthful utilities of every bidder for each flattened profile row:
    /// `(1 - sigma_i) * sum_j v_ij g_ij` since bids equal values.
    pub fn truthful_utilities_batch(&self, profiles: ArrayView2<'_, T>) -> Result<Array2<T>> {
        let (n, m) = (self.n_bidders, self.n_items);
        let fwd = self.forward_batch(profiles)?;
        let shares = fwd.shares();
        let fractions = fwd.fractions();
        let mut utilities = Array2::zeros((profiles.nrows(), n));
        for r in 0..profiles.nrows() {
            for i in 0..n {
                let mut value = T::zero();
                for j in 0..m {
                    value += profiles[[r, i * m + j]] * shares[[r, i * m + j]];
                }
                utilities[[r, i]] = (T::one() - fractions[[r, i]]) * value;
            }
        }
        Ok(utilities)
    }

    /// Single-profile wrapper around [`Self::utility_and_bid_grad_batch`].
    pub fn utility_and_bid_gradient(
        &self,
        true_values_row: ArrayView1<'_, T>,
        bids: &ValuationProfile<T>,
        bidder: usize,
    ) -> Result<(T, Array1<T>)> {
        self.check_bids(bids)?;
        if bidder >= self.n_bidders || true_values_row.len() != self.n_items {
            return Err(Error::DimensionMismatch(format!(
                "bidder {bidder} / value row of {} invalid for {}x{}",
                true_values_row.len(),
                self.n_bidders,
                self.n_items
            )));
        }
        let flat = bids.flatten();
        let (u, g) = self.utility_and_bid_grad_batch(
            flat.view().insert_axis(Axis(0)),
            true_values_row.insert_axis(Axis(0)),
            &[bidder],
        )?;
        Ok((u[0], g.row(0).to_owned()))
    }
}

/// Black-box auction interface: the regret engine only needs outcomes and
/// (for gradient-based misreport search) a utility gradient, which defaults
/// to central finite differences.
pub trait Mechanism<T: Scalar>: Sync {
    fn n_bidders(&self) -> usize;
    fn n_items(&self) -> usize;
    fn run(&self, bids: &ValuationProfile<T>) -> Result<AuctionOutcome<T>>;

    /// Utility of `bidder` with true values `true_values_row` under `bids`.
    fn utility(
        &self,
        true_values_row: ArrayView1<'_, T>,
        bids: &ValuationProfile<T>,
        bidder: usize,
    ) -> Result<T> {
        let outcome = self.run(bids)?;
        auction::utility(
            true_values_row,
            outcome.allocation.bidder_row(bidder),
            outcome.payments.amounts()[bidder],
        )
    }

    fn utility_and_own_bid_gradient(
        &self,
        true_values_row: ArrayView1<'_, T>,
        bids: &ValuationProfile<T>,
        bidder: usize,
    ) -> Result<(T, Array1<T>)> {
        let u = self.utility(true_values_row, bids, bidder)?;
        let m = self.n_items();
        let h = T::epsilon().powf(T::from_f64_lossy(1.0 / 3.0));
        let mut grad = Array1::zeros(m);
        let mut row = bids.row(bidder).to_owned();
        for j in 0..m {
            let orig = row[j];
            row[j] = orig + h;
            let plus = self.utility(true_values_row, &bids.with_row(bidder, row.view()), bidder)?;
            row[j] = orig - h;
            let minus = self.utility(true_values_row, &bids.with_row(bidder, row.view()), bidder)?;
            row[j] = orig;
            grad[j] = (plus - minus) / (h + h);
        }
        Ok((u, grad))
    }
}

impl<T: Scalar> Mechanism<T> for MechanismParams<T> {
    fn n_bidders(&self) -> usize {
        self.n_bidders
    }

    fn n_items(&self) -> usize {
        self.n_items
    }

    fn run(&self, bids: &ValuationProfile<T>) -> Result<AuctionOutcome<T>> {
        Ok(self.run_mechanism(bids)?.0)
    }

    fn utility_and_own_bid_gradient(
        &self,
        true_values_row: ArrayView1<'_, T>,
        bids: &ValuationProfile<T>,
        bidder: usize,
    ) -> Result<(T, Array1<T>)> {
        self.utility_and_bid_gradient(true_values_row, bids, bidder)
    }
}

pub mod adapters {
    //! Hand-coded classic single-item auctions used as ground truth in
    //! regret tests: second-price is strategy-proof, first-price is not.

    use super::*;

    fn winner<T: Scalar>(bids: &ValuationProfile<T>) -> usize {
        let mut best = 0usize;
        for i in 1..bids.n_bidders() {
            // Ties break to the highest index, so a bidder matching the
            // standing high bid does not win by tying it.
            if bids.values()[[i, 0]] >= bids.values()[[best, 0]] {
                best = i;
            }
        }
        best
    }

    fn single_item_outcome<T: Scalar>(n: usize, winner: usize, price: T) -> AuctionOutcome<T> {
        let mut shares = Array2::zeros((n + 1, 1));
        shares[[winner, 0]] = T::one();
        let mut amounts = Array1::zeros(n);
        amounts[winner] = price;
        AuctionOutcome {
            allocation: Allocation::from_unchecked(shares),
            payments: Payments::from_unchecked(amounts),
        }
    }

    /// Single-item second-price (Vickrey) auction: strategy-proof, so every
    /// regret oracle must report exactly zero.
    pub struct SecondPriceAuction {
        pub n_bidders: usize,
    }

    impl<T: Scalar> Mechanism<T> for SecondPriceAuction {
        fn n_bidders(&self) -> usize {
            self.n_bidders
        }
        fn n_items(&self) -> usize {
            1
        }
        fn run(&self, bids: &ValuationProfile<T>) -> Result<AuctionOutcome<T>> {
            let w = winner(bids);
            let mut second = T::zero();
            for i in 0..self.n_bidders {
                if i != w {
                    second = second.max(bids.values()[[i, 0]]);
                }
            }
            Ok(single_item_outcome(self.n_bidders, w, second))
        }
    }

    /// Single-item first-price auction: the winner pays their own bid, so
    /// shading below the truthful value is profitable.
    pub struct FirstPriceAuction {
        pub n_bidders: usize,
    }

    impl<T: Scalar> Mechanism<T> for FirstPriceAuction {
        fn n_bidders(&self) -> usize {
            self.n_bidders
        }
        fn n_items(&self) -> usize {
            1
        }
        fn run(&self, bids: &ValuationProfile<T>) -> Result<AuctionOutcome<T>> {
            let w = winner(bids);
            Ok(single_item_outcome(self.n_bidders, w, bids.values()[[w, 0]]))
        }
    }
}
