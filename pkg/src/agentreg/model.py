"""End-to-end registration model behind a scikit-learn style estimator.

`RegistrationModel.fit` trains the feature pathway on synthetic pairs with
plain per-pair gradient descent: phase-map fusion into the patch features,
query aggregation, stage-scheduled agent selection, agent-bridged fusion,
and a circle loss over mined patch/superpoint pairs. All gradients are the
hand-derived backward passes of the underlying modules. `predict` runs the
deployed model through coarse-to-fine matching and robust PnP to produce a
rigid transform per pair.

Parameter conventions follow scikit-learn: constructor arguments are
stored untouched, fitted state lives in trailing-underscore attributes,
and `get_params`/`set_params`/`clone` work as usual.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import agents as ag
from . import attention as att
from .errors import (
    ConfigurationError, EstimationFailureError, InsufficientDataError,
    NumericalError,
)
from .losses import (
    LossParams, circle_loss, cosine_distance_matrix, matching_circle_loss,
    mine_pair_masks,
)
from .matching import (
    CorrespondenceSet, FeatureGrid, PointFeatures, coarse_match, fine_match,
)
from .metrics import (
    MetricReport, feature_matching_recall, inlier_ratio, patch_inlier_ratio,
    registration_recall,
)
from .numerics import init_conv_stack, sigmoid
from .phase import extract_phase_map, fuse_phase_backward, fuse_phase_features_cached
from .pose import RansacConfig, ransac_pnp
from .rng import Rng
from .synth import SyntheticPair
from .tensorio import load_checkpoint, save_checkpoint
from .validation import check_pairs


def pixel_groups(pair: SyntheticPair) -> dict:
    """Per-patch (uv, fine feature) blocks for fine matching."""
    groups = {}
    for g in np.unique(pair.point_patch):
        idx = np.flatnonzero(pair.point_patch == g)
        groups[int(g)] = (pair.fine_pixel_uv[idx], pair.fine_pixel_features[idx])
    return groups


def point_groups(pair: SyntheticPair) -> dict:
    """Per-superpoint (xyz, fine feature) blocks for fine matching."""
    return {s: (pair.points_cloud[members], pair.fine_point_features[members])
            for s, members in enumerate(pair.superpoint_members)}


def _fine_task_loss(pair: SyntheticPair, params: LossParams) -> float:
    """Dense-level circle loss over the ground-truth coarse blocks.

    Fine features are generator outputs, not model outputs, so this term
    carries no parameter gradient; its value completes the task loss.
    """
    pix = pixel_groups(pair)
    pts = point_groups(pair)
    cam_points = pair.points_cam
    losses = []
    for g, s in pair.gt_coarse:
        if int(g) not in pix:
            continue
        idx_pix = np.flatnonzero(pair.point_patch == g)
        members = pair.superpoint_members[int(s)]
        if idx_pix.size == 0 or members.size == 0:
            continue
        _, pix_feats = pix[int(g)]
        _, pt_feats = pts[int(s)]
        dist, _ = cosine_distance_matrix(pix_feats, pt_feats)
        d3d = np.linalg.norm(cam_points[idx_pix][:, None, :]
                             - cam_points[members][None, :, :], axis=2)
        for r in range(dist.shape[0]):
            pos = dist[r, d3d[r] <= params.pos_radius]
            neg = dist[r, d3d[r] >= params.neg_radius]
            if pos.size and neg.size:
                losses.append(circle_loss(pos, neg, params).loss)
    return float(np.mean(losses)) if losses else 0.0


class RegistrationModel(BaseEstimator):
    """Trainable image-to-point-cloud registration pipeline.

    The four `use_*` switches mirror the ablation grid: phase-map feature
    enhancement, agent-bridged fusion (plain cross-attention otherwise),
    the staged reward-guided selection schedule, and always-on top-k
    selection from the redundant pool.
    """

    def __init__(self, n_queries=32, n_agents=12, attention_layers=3,
                 adaptor_hidden=8, epochs=40, learning_rate=0.01,
                 score_learning_rate=2.0, use_phase=True, use_rai=True,
                 use_tri_stage=True, use_topk=False, gamma=10.0, delta_p=0.1,
                 delta_n=1.4, lambda1=1.0, lambda2=1.0, pos_radius=0.05,
                 neg_radius=0.15, top_c=3, s_min=0.0, s_fine=0.0,
                 ransac_threshold_px=8.0, ransac_max_iters=5000,
                 ransac_confidence=0.999, ransac_min_sample=6, tau=20.0,
                 tau_decay=0.9, tau_min=5.0, beta_mask=0.3, mu_entropy=0.01,
                 stage1_epochs=15, stage2_period=5, eps_loss=1e-6, seed=0):
        self.n_queries = n_queries
        self.n_agents = n_agents
        self.attention_layers = attention_layers
        self.adaptor_hidden = adaptor_hidden
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.score_learning_rate = score_learning_rate
        self.use_phase = use_phase
        self.use_rai = use_rai
        self.use_tri_stage = use_tri_stage
        self.use_topk = use_topk
        self.gamma = gamma
        self.delta_p = delta_p
        self.delta_n = delta_n
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.pos_radius = pos_radius
        self.neg_radius = neg_radius
        self.top_c = top_c
        self.s_min = s_min
        self.s_fine = s_fine
        self.ransac_threshold_px = ransac_threshold_px
        self.ransac_max_iters = ransac_max_iters
        self.ransac_confidence = ransac_confidence
        self.ransac_min_sample = ransac_min_sample
        self.tau = tau
        self.tau_decay = tau_decay
        self.tau_min = tau_min
        self.beta_mask = beta_mask
        self.mu_entropy = mu_entropy
        self.stage1_epochs = stage1_epochs
        self.stage2_period = stage2_period
        self.eps_loss = eps_loss
        self.seed = seed

    # -- assembled config views -------------------------------------------

    def _loss_params(self) -> LossParams:
        return LossParams(gamma=self.gamma, delta_p=self.delta_p,
                          delta_n=self.delta_n, lambda1=self.lambda1,
                          lambda2=self.lambda2, pos_radius=self.pos_radius,
                          neg_radius=self.neg_radius)

    def _reward_config(self) -> ag.RewardConfig:
        return ag.RewardConfig(tau=self.tau, tau_decay=self.tau_decay,
                               tau_min=self.tau_min, beta_mask=self.beta_mask,
                               mu_entropy=self.mu_entropy,
                               stage1_epochs=self.stage1_epochs,
                               stage2_period=self.stage2_period,
                               eps_loss=self.eps_loss)

    def _ransac_config(self) -> RansacConfig:
        return RansacConfig(threshold_px=self.ransac_threshold_px,
                            max_iters=self.ransac_max_iters,
                            confidence=self.ransac_confidence,
                            min_sample=self.ransac_min_sample)

    # -- data preparation ---------------------------------------------------

    def _prepare(self, pair: SyntheticPair, loss_params: LossParams) -> dict:
        prep = {"pair": pair}
        if self.use_phase:
            prep["phase"] = extract_phase_map(pair.image)
        gh, gw, c = pair.base_features.shape
        prep["pos_enc"] = att.sinusoidal_grid_encoding(gh, gw, c)
        prep["pos_mask"], prep["neg_mask"] = mine_pair_masks(
            pair.patch_xyz_cam, pair.patch_occupied,
            pair.superpoint_positions, pair.t_gt, loss_params)
        prep["fine_loss"] = _fine_task_loss(pair, loss_params)
        return prep

    # -- forward / backward ---------------------------------------------------

    def _forward(self, prep: dict, stage: ag.Stage, rng: Rng | None):
        pair = prep["pair"]
        state = {"stage": stage}
        gh, gw, c = pair.base_features.shape
        if self.use_phase:
            fused, adaptor_cache = fuse_phase_features_cached(
                pair.base_features, prep["phase"], self.adaptor_)
            state["adaptor_cache"] = adaptor_cache
        else:
            fused = pair.base_features
        f_i0 = fused.reshape(-1, c) + prep["pos_enc"]
        f_p0 = pair.superpoint_features + \
            pair.superpoint_positions @ self.weights_.pos_lift
        state["f_i0"], state["f_p0"] = f_i0, f_p0

        if self.use_rai:
            q_a, ias_cache = att.ias_aggregate_cached(
                self.pool_.queries, f_i0, f_p0, self.weights_)
            state["q_a"], state["ias_cache"] = q_a, ias_cache
            if stage is ag.Stage.REWARDS_GUIDED:
                outcome = ag.sample_actions(self.pool_, rng,
                                            beta_mask=self.beta_mask)
                state["outcome"] = outcome
                agents_in, masks = q_a, outcome.soft_masks
                state["selected"] = np.flatnonzero(outcome.actions).tolist()
            else:
                idx = ag.top_k_indices(self.pool_.scores, self.pool_.k)
                state["topk_idx"] = idx
                agents_in = q_a[idx]
                # the evaluation block gates selected agents by their score;
                # the fixed-query variant has no scoring and uses unit masks
                if self.use_topk or self.use_tri_stage:
                    masks = sigmoid(self.pool_.scores[idx])
                else:
                    masks = np.ones(idx.shape[0])
                state["selected"] = idx.tolist()
            f_i_out, f_p_out, rai_cache = att.rai_attention_cached(
                agents_in, f_i0, f_p0, masks, self.weights_)
            state["rai_cache"] = rai_cache
        else:
            f_i_out, f_p_out, fusion_cache = att.direct_cross_fusion_cached(
                f_i0, f_p0, self.weights_)
            state["fusion_cache"] = fusion_cache
            state["selected"] = []
        state["f_i_out"], state["f_p_out"] = f_i_out, f_p_out
        return state

    def _backward_and_step(self, prep: dict, state: dict, d_f_i, d_f_p,
                           d_scores_rl: np.ndarray | None):
        lr = self.learning_rate
        w = self.weights_
        if self.use_rai:
            grads = att.rai_backward(w, state["rai_cache"], d_f_i, d_f_p)
            stage = state["stage"]
            if stage is ag.Stage.REWARDS_GUIDED:
                d_q_a = grads["agents"]
            else:
                idx = state["topk_idx"]
                d_q_a = np.zeros_like(state["q_a"])
                d_q_a[idx] = grads["agents"]
                if self.use_topk or self.use_tri_stage:
                    # task gradient reaches the scores through the gate
                    p = sigmoid(self.pool_.scores[idx])
                    self.pool_.scores[idx] -= lr * grads["masks"] * p * (1.0 - p)
            dq, df_i0, df_p0, layer_grads = att.ias_backward(
                w, state["ias_cache"], d_q_a)
            df_i0 += grads["f_i"]
            df_p0 += grads["f_p"]
            self.pool_.queries -= lr * dq
            w.w_query -= lr * grads["w_query"]
            w.w_point -= lr * grads["w_point"]
            w.w_image -= lr * grads["w_image"]
            for layer, lg in zip(w.ias_layers, layer_grads):
                layer.w_q -= lr * lg["w_q"]
                layer.w_k -= lr * lg["w_k"]
                layer.w_v -= lr * lg["w_v"]
                layer.ff_w1 -= lr * lg["ff_w1"]
                layer.ff_b1 -= lr * lg["ff_b1"]
                layer.ff_w2 -= lr * lg["ff_w2"]
                layer.ff_b2 -= lr * lg["ff_b2"]
        else:
            grads = att.direct_cross_fusion_backward(
                w, state["fusion_cache"], d_f_i, d_f_p)
            df_i0, df_p0 = grads["f_i"], grads["f_p"]
            w.w_point -= lr * grads["w_point"]
            w.w_image -= lr * grads["w_image"]

        pair = prep["pair"]
        w.pos_lift -= lr * (pair.superpoint_positions.T @ df_p0)
        if self.use_phase:
            gh, gw, c = pair.base_features.shape
            adaptor_grads, _ = fuse_phase_backward(
                self.adaptor_, state["adaptor_cache"], df_i0.reshape(gh, gw, c))
            for layer, (dk, db) in zip(self.adaptor_.layers, adaptor_grads):
                layer.kernel -= lr * dk
                layer.bias -= lr * db
        if d_scores_rl is not None:
            self.pool_.scores -= self.score_learning_rate * d_scores_rl

    # -- estimator API ---------------------------------------------------------

    def fit(self, X, y=None):
        pairs = check_pairs(X)
        if self.use_tri_stage and self.use_topk:
            raise ConfigurationError(
                "use_tri_stage and use_topk are mutually exclusive")
        if self.n_agents > self.n_queries:
            raise ConfigurationError("n_agents cannot exceed n_queries")

        loss_params = self._loss_params()
        reward_cfg = self._reward_config()
        root = Rng(self.seed)
        init = root.derive(0)

        c = pairs[0].base_features.shape[2]
        self.n_features_in_ = c
        self.weights_ = att.init_attention_weights(
            c, self.attention_layers, init.derive(0), scale=0.1)
        self.adaptor_ = init_conv_stack(
            (3, self.adaptor_hidden, self.adaptor_hidden, c),
            init.derive(1), scale=0.1)
        self.pool_ = ag.new_pool(self.n_queries, c, self.n_agents,
                                 init.derive(2))

        preps = [self._prepare(p, loss_params) for p in pairs]
        self.history_ = []
        for epoch in range(1, self.epochs + 1):
            if self.use_rai and self.use_tri_stage:
                stage = ag.stage_of_epoch(epoch, reward_cfg)
            else:
                stage = ag.Stage.WARM_UP
            self.pool_.stage = stage
            tau_e = ag.decay_tau(reward_cfg, epoch)
            alpha = ag.fusion_alpha(epoch, tau_e)
            log = {"epoch": epoch, "stage": stage.value, "tau": tau_e,
                   "alpha": alpha, "l_t": [], "l_full": [], "selected": []}
            for i, prep in enumerate(preps):
                rng_pair = root.derive(1, epoch, i)
                state = self._forward(prep, stage, rng_pair)
                res = matching_circle_loss(
                    state["f_i_out"], state["f_p_out"],
                    prep["pos_mask"], prep["neg_mask"], loss_params)
                l_t = res.loss + prep["fine_loss"]
                d_scores_rl = None
                l_full = None
                if stage is ag.Stage.REWARDS_GUIDED and self.use_rai:
                    outcome = state["outcome"]
                    pooled_i = state["f_i0"].mean(axis=0)
                    pooled_p = state["f_p0"].mean(axis=0)
                    locals_ = np.array([
                        ag.local_reward(q, pooled_i, pooled_p)
                        for q in state["q_a"]])
                    g_reward = ag.global_reward(max(res.loss, 0.0),
                                                reward_cfg.eps_loss)
                    fused_r = alpha * locals_ + (1.0 - alpha) * g_reward
                    ag.attach_rewards(outcome, fused_r)
                    rl = ag.reinforce_loss(outcome)
                    l_full, grad_full = ag.stage2_objective(
                        rl, self.pool_.scores, self.mu_entropy)
                    d_scores_rl = self.lambda2 * grad_full
                total = l_t * self.lambda1 + \
                    (self.lambda2 * l_full if l_full is not None else 0.0)
                if not np.isfinite(total):
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch}, pair {i}: "
                        f"l_t={l_t}, l_full={l_full}")
                self._backward_and_step(
                    prep, state, self.lambda1 * res.d_features_a,
                    self.lambda1 * res.d_features_b, d_scores_rl)
                log["l_t"].append(l_t)
                if l_full is not None:
                    log["l_full"].append(l_full)
                log["selected"] = state["selected"]
            log["l_t"] = float(np.mean(log["l_t"]))
            log["l_full"] = float(np.mean(log["l_full"])) if log["l_full"] else None
            self.history_.append(log)

        self.pool_.stage = ag.Stage.FINAL
        self.selected_ = ag.final_select(self.pool_)
        return self

    def _check_fitted(self):
        if not hasattr(self, "weights_"):
            raise ConfigurationError("model is not fitted; call fit first")

    def fused_features(self, pair: SyntheticPair):
        """Deployed-forward fused descriptors for one pair."""
        self._check_fitted()
        prep = self._prepare(pair, self._loss_params())
        state = self._forward(prep, ag.Stage.FINAL, None)
        return state["f_i_out"], state["f_p_out"]

    def match(self, pair: SyntheticPair) -> CorrespondenceSet:
        f_i, f_p = self.fused_features(pair)
        grid = FeatureGrid(features=f_i, patch_centers=pair.patch_centers,
                           patch_size=pair.spec.patch_size)
        pts = PointFeatures(features=f_p,
                            positions=pair.superpoint_positions,
                            members=pair.superpoint_members)
        coarse = coarse_match(grid, pts, top_c=self.top_c, s_min=self.s_min)
        fine = fine_match(coarse, pixel_groups(pair), point_groups(pair),
                          s_fine=self.s_fine)
        return CorrespondenceSet(coarse=coarse, fine=fine)

    def predict_one(self, pair: SyntheticPair, index: int = 0):
        """Pose estimate for one pair, or None when estimation fails."""
        corr = self.match(pair)
        rng = Rng(self.seed).derive(2, index)
        try:
            pose, _ = ransac_pnp(corr.fine.uv, corr.fine.xyz,
                                 pair.spec.intrinsics, self._ransac_config(),
                                 rng)
            return pose
        except (InsufficientDataError, EstimationFailureError):
            return None

    def predict(self, X):
        pairs = check_pairs(X)
        return [self.predict_one(p, i) for i, p in enumerate(pairs)]

    def evaluate(self, X, oracle_pose: bool = False) -> MetricReport:
        """Full metric report over pairs; `oracle_pose` substitutes the
        ground-truth transform for the estimate (debug path)."""
        pairs = check_pairs(X)
        rows = []
        irs, pirs, estimates, gts, clouds = [], [], [], [], []
        for i, pair in enumerate(pairs):
            corr = self.match(pair)
            pose = pair.t_gt if oracle_pose else self.predict_one(pair, i)
            grid = FeatureGrid(features=np.zeros((pair.spec.patch_count, 1)),
                               patch_centers=pair.patch_centers,
                               patch_size=pair.spec.patch_size)
            pts = PointFeatures(features=pair.superpoint_features,
                                positions=pair.superpoint_positions,
                                members=pair.superpoint_members)
            ir = inlier_ratio(corr.fine, pair.pixel_xyz_cam(), pair.t_gt)
            pir = patch_inlier_ratio(corr.coarse, grid, pts, pair.points_cloud,
                                     pair.t_gt, pair.spec.intrinsics)
            irs.append(ir.value)
            pirs.append(pir.value)
            estimates.append(pose)
            gts.append(pair.t_gt)
            clouds.append(pair.points_cloud)
            rows.append({"pair": i, "ir": ir.value, "pir": pir.value,
                         "n_coarse": len(corr.coarse), "n_fine": len(corr.fine),
                         "pose_failed": int(pose is None)})
        rr, rmses = registration_recall(estimates, gts, clouds)
        fmr = feature_matching_recall(irs)
        for row, rmse in zip(rows, rmses):
            row["rmse"] = "" if rmse is None else f"{rmse:.6f}"
            row["recalled"] = int(rmse is not None and rmse < 0.10)
        report = MetricReport(ir=float(np.mean(irs)) if irs else 0.0,
                              fmr=fmr.value, rr=rr.value,
                              pir=float(np.mean(pirs)) if pirs else 0.0,
                              per_pair=rows)
        return report

    def score(self, X, y=None) -> float:
        """Registration recall on the given pairs."""
        return self.evaluate(X).rr

    # -- persistence ------------------------------------------------------------

    def save(self, path) -> None:
        self._check_fitted()
        meta = {f"param_{k}": repr(v) for k, v in self.get_params().items()}
        meta["k"] = str(self.pool_.k)
        meta["stage"] = self.pool_.stage.value
        meta["epoch"] = str(self.epochs)
        meta["selected"] = ",".join(str(i) for i in self.selected_)
        meta["n_features_in"] = str(self.n_features_in_)
        tensors = {"pool_queries": self.pool_.queries,
                   "pool_scores": self.pool_.scores,
                   "pos_lift": self.weights_.pos_lift,
                   "w_query": self.weights_.w_query,
                   "w_point": self.weights_.w_point,
                   "w_image": self.weights_.w_image}
        for i, layer in enumerate(self.weights_.ias_layers):
            for name in ("w_q", "w_k", "w_v", "ff_w1", "ff_b1", "ff_w2", "ff_b2"):
                tensors[f"ias{i}_{name}"] = getattr(layer, name)
        for i, layer in enumerate(self.adaptor_.layers):
            tensors[f"adaptor{i}_kernel"] = layer.kernel
            tensors[f"adaptor{i}_bias"] = layer.bias
        save_checkpoint(path, meta, tensors)

    @classmethod
    def load(cls, path) -> "RegistrationModel":
        meta, tensors = load_checkpoint(path)
        import ast
        params = {k[len("param_"):]: ast.literal_eval(v)
                  for k, v in meta.items() if k.startswith("param_")}
        model = cls(**params)
        c = int(meta["n_features_in"])
        model.n_features_in_ = c
        layers = []
        for i in range(model.attention_layers):
            layers.append(att.IasLayer(
                w_q=tensors[f"ias{i}_w_q"], w_k=tensors[f"ias{i}_w_k"],
                w_v=tensors[f"ias{i}_w_v"], ff_w1=tensors[f"ias{i}_ff_w1"],
                ff_b1=tensors[f"ias{i}_ff_b1"], ff_w2=tensors[f"ias{i}_ff_w2"],
                ff_b2=tensors[f"ias{i}_ff_b2"]))
        model.weights_ = att.AttentionWeights(
            ias_layers=layers, w_query=tensors["w_query"],
            w_point=tensors["w_point"], w_image=tensors["w_image"],
            pos_lift=tensors["pos_lift"])
        from .numerics import ConvLayer, ConvStackWeights
        adaptor_layers = [ConvLayer(kernel=tensors[f"adaptor{i}_kernel"],
                                    bias=tensors[f"adaptor{i}_bias"])
                          for i in range(3)]
        model.adaptor_ = ConvStackWeights(layers=adaptor_layers)
        model.pool_ = ag.QueryPool(queries=tensors["pool_queries"],
                                   scores=tensors["pool_scores"],
                                   k=int(meta["k"]),
                                   stage=ag.Stage(meta["stage"]))
        model.selected_ = np.array([int(t) for t in meta["selected"].split(",")
                                    if t], dtype=np.int64)
        model.history_ = []
        return model
