#include "ymask/loss.h"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace ymask {

namespace {

constexpr double kAspectScale = 4.0 / (std::numbers::pi * std::numbers::pi);

double aspect_angle(double w, double h) { return h > 0 ? std::atan(w / h) : std::numbers::pi / 2; }

// d atan(w/h) / d(w, h); zero for a point box where it is undefined.
std::pair<double, double> aspect_angle_grad(double w, double h) {
    const double d = w * w + h * h;
    if (d <= 0) return {0.0, 0.0};
    return {h / d, -w / d};
}

}  // namespace

CiouTerms ciou_terms(const Box& p, const Box& g) {
    CiouTerms t;
    if (p.cx == g.cx && p.cy == g.cy && p.w == g.w && p.h == g.h) {
        t.iou = p.area() > 0 ? 1.0 : 0.0;
        t.ciou = 1.0;
        return t;
    }
    t.iou = iou(p, g);
    const double cw = std::max(p.x2(), g.x2()) - std::min(p.x1(), g.x1());
    const double ch = std::max(p.y2(), g.y2()) - std::min(p.y1(), g.y1());
    t.c2 = cw * cw + ch * ch;
    t.rho2 = (p.cx - g.cx) * (p.cx - g.cx) + (p.cy - g.cy) * (p.cy - g.cy);
    const double dtheta = aspect_angle(g.w, g.h) - aspect_angle(p.w, p.h);
    t.v = kAspectScale * dtheta * dtheta;
    const double denom = (1.0 - t.iou) + t.v;
    t.alpha = denom > 0 ? t.v / denom : 0.0;
    const double dist = t.c2 > 0 ? t.rho2 / t.c2 : 0.0;
    t.ciou = t.iou - dist - t.alpha * t.v;
    return t;
}

double ciou_loss_with_alpha(const Box& p, const Box& g, double alpha) {
    if (p.cx == g.cx && p.cy == g.cy && p.w == g.w && p.h == g.h) return 0.0;
    const auto t = ciou_terms(p, g);
    return 1.0 - t.iou + (t.c2 > 0 ? t.rho2 / t.c2 : 0.0) + alpha * t.v;
}

std::array<double, 4> ciou_loss_grad(const Box& p, const Box& g, const double* alpha) {
    std::array<double, 4> out{0, 0, 0, 0};
    if (p.cx == g.cx && p.cy == g.cy && p.w == g.w && p.h == g.h) return out;
    auto t = ciou_terms(p, g);
    if (alpha) t.alpha = *alpha;

    // corner derivatives w.r.t. (cx, cy, w, h)
    using Grad = std::array<double, 4>;
    const Grad dx1{1, 0, -0.5, 0}, dx2{1, 0, 0.5, 0}, dy1{0, 1, 0, -0.5}, dy2{0, 1, 0, 0.5};
    const Grad zero{0, 0, 0, 0};
    auto pick = [](bool from_pred, const Grad& d) { return from_pred ? d : Grad{0, 0, 0, 0}; };

    // intersection
    const double ix = std::min(p.x2(), g.x2()) - std::max(p.x1(), g.x1());
    const double iy = std::min(p.y2(), g.y2()) - std::max(p.y1(), g.y1());
    const double inter = ix > 0 && iy > 0 ? ix * iy : 0.0;
    const double uni = p.area() + g.area() - inter;
    Grad d_iou = zero;
    if (inter > 0 && uni > 0) {
        const Grad dix_r = pick(p.x2() <= g.x2(), dx2), dix_l = pick(p.x1() >= g.x1(), dx1);
        const Grad diy_b = pick(p.y2() <= g.y2(), dy2), diy_t = pick(p.y1() >= g.y1(), dy1);
        const Grad d_area{0, 0, p.h, p.w};
        for (int i = 0; i < 4; ++i) {
            const double d_inter = (dix_r[i] - dix_l[i]) * iy + ix * (diy_b[i] - diy_t[i]);
            const double d_union = d_area[i] - d_inter;
            d_iou[i] = (d_inter * uni - inter * d_union) / (uni * uni);
        }
    }

    // center distance over enclosing diagonal
    Grad d_dist = zero;
    if (t.c2 > 0) {
        const double cw = std::max(p.x2(), g.x2()) - std::min(p.x1(), g.x1());
        const double ch = std::max(p.y2(), g.y2()) - std::min(p.y1(), g.y1());
        const Grad dcw_r = pick(p.x2() >= g.x2(), dx2), dcw_l = pick(p.x1() <= g.x1(), dx1);
        const Grad dch_b = pick(p.y2() >= g.y2(), dy2), dch_t = pick(p.y1() <= g.y1(), dy1);
        const Grad d_rho2{2 * (p.cx - g.cx), 2 * (p.cy - g.cy), 0, 0};
        for (int i = 0; i < 4; ++i) {
            const double d_c2 = 2 * cw * (dcw_r[i] - dcw_l[i]) + 2 * ch * (dch_b[i] - dch_t[i]);
            d_dist[i] = d_rho2[i] / t.c2 - t.rho2 * d_c2 / (t.c2 * t.c2);
        }
    }

    // aspect penalty; alpha is held constant
    const double dtheta = aspect_angle(g.w, g.h) - aspect_angle(p.w, p.h);
    const auto [dw, dh] = aspect_angle_grad(p.w, p.h);
    const Grad d_v{0, 0, -2 * kAspectScale * dtheta * dw, -2 * kAspectScale * dtheta * dh};

    for (int i = 0; i < 4; ++i) out[i] = -d_iou[i] + d_dist[i] + t.alpha * d_v[i];
    return out;
}

template <typename T>
Var<T> ciou_loss_rows(const Var<T>& pred, const Tensor<T>& gt, const std::vector<double>* alpha) {
    if (pred.rank() != 2 || pred.dim(1) != 4 || gt.shape() != pred.shape()) {
        throw DimensionError("ciou_loss_rows: expected matching [n,4] boxes, got " + shape_str(pred.shape()) + " and " +
                             shape_str(gt.shape()));
    }
    const std::size_t n = pred.dim(0);
    if (alpha && alpha->size() != n) throw DimensionError("ciou_loss_rows: alpha count does not match boxes");
    const auto pv = pred.value().data();
    auto row = [](std::span<const T> d, std::size_t i) {
        return Box{static_cast<double>(d[4 * i]), static_cast<double>(d[4 * i + 1]), static_cast<double>(d[4 * i + 2]),
                   static_cast<double>(d[4 * i + 3])};
    };
    Tensor<T> out({n});
    for (std::size_t i = 0; i < n; ++i) {
        const Box p = row(pv, i), q = row(gt.data(), i);
        out[i] = static_cast<T>(alpha ? ciou_loss_with_alpha(p, q, (*alpha)[i]) : ciou_loss(p, q));
    }
    const auto id = pred.id();
    std::vector<double> fixed;
    if (alpha) fixed = *alpha;
    return pred.tape().record("ciou_loss", std::move(out), {pred}, [=](Tape<T>& t, const Tensor<T>& g) {
        const auto p = t.value(id).data();
        auto gd = t.grad_buffer(id).data();
        for (std::size_t i = 0; i < n; ++i) {
            const auto d = ciou_loss_grad(row(p, i), row(gt.data(), i), fixed.empty() ? nullptr : &fixed[i]);
            for (std::size_t k = 0; k < 4; ++k) gd[4 * i + k] += g[i] * static_cast<T>(d[k]);
        }
    });
}

template <typename T>
LossBreakdown<T> detection_loss(const std::vector<Var<T>>& heads, const std::vector<std::vector<GroundTruth>>& targets,
                                const LossGeometry& geom, const LossWeights& weights, DetachedTerms* detached) {
    if (heads.size() != kStrides.size()) throw DimensionError("detection_loss: expected 3 head maps");
    const std::size_t nc = geom.n_classes, no = 5 + nc;
    const std::size_t batch = heads[0].dim(0);
    if (targets.size() != batch) {
        throw DimensionError("detection_loss: " + std::to_string(targets.size()) + " target lists for batch " +
                             std::to_string(batch));
    }
    Tape<T>& tape = heads[0].tape();
    const double size = static_cast<double>(geom.input_size);

    LossBreakdown<T> out;
    std::vector<Var<T>> box_terms, cls_terms;
    Var<T> obj_total;
    const bool reuse = detached && detached->frozen;
    if (detached && !reuse) {
        detached->alpha.assign(heads.size(), {});
        detached->obj_target.assign(heads.size(), {});
    }
    if (reuse && (detached->alpha.size() != heads.size() || detached->obj_target.size() != heads.size())) {
        throw DimensionError("detection_loss: frozen terms recorded for a different head count");
    }

    for (std::size_t k = 0; k < heads.size(); ++k) {
        const auto& head = heads[k];
        if (head.rank() != 4 || head.dim(0) != batch || head.dim(1) != 3 * no || head.dim(2) != head.dim(3)) {
            throw DimensionError("detection_loss: head " + std::to_string(k) + " has shape " + shape_str(head.shape()));
        }
        const std::size_t grid = head.dim(2);
        const double stride = static_cast<double>(kStrides[k]);

        // matches on this scale
        std::vector<std::size_t> index;
        std::vector<T> tbox, anchor_wh, onehot;
        std::vector<std::size_t> slot;  // (b, a, gy, gx) flattened
        for (std::size_t b = 0; b < batch; ++b) {
            for (const auto& gt : targets[b]) {
                if (gt.class_id < 0 || static_cast<std::size_t>(gt.class_id) >= nc) {
                    throw DimensionError("detection_loss: class id " + std::to_string(gt.class_id) + " out of range");
                }
                const double gx = gt.box.cx * size / stride, gy = gt.box.cy * size / stride;
                const double gw = gt.box.w * size / stride, gh = gt.box.h * size / stride;
                const auto cx = std::min(static_cast<std::size_t>(std::max(gx, 0.0)), grid - 1);
                const auto cy = std::min(static_cast<std::size_t>(std::max(gy, 0.0)), grid - 1);
                for (std::size_t a = 0; a < 3; ++a) {
                    const double aw = geom.anchors[k][a].first / stride, ah = geom.anchors[k][a].second / stride;
                    if (gw <= 0 || gh <= 0) continue;
                    const double ratio = std::max({gw / aw, aw / gw, gh / ah, ah / gh});
                    if (!(ratio < kAnchorRatioLimit)) continue;
                    for (std::size_t j = 0; j < no; ++j) index.push_back(((b * 3 * no + a * no + j) * grid + cy) * grid + cx);
                    const double ox = gx - static_cast<double>(cx), oy = gy - static_cast<double>(cy);
                    for (double v : {ox, oy, gw, gh}) tbox.push_back(static_cast<T>(v));
                    anchor_wh.push_back(static_cast<T>(aw));
                    anchor_wh.push_back(static_cast<T>(ah));
                    for (std::size_t c = 0; c < nc; ++c) onehot.push_back(static_cast<T>(c == static_cast<std::size_t>(gt.class_id)));
                    slot.push_back(((b * 3 + a) * grid + cy) * grid + cx);
                }
            }
        }

        Tensor<T> obj_target({batch, 3, 1, grid, grid});
        const std::size_t n = slot.size();
        if (n > 0) {
            auto sel = gather(head, std::move(index), {n, no});
            auto pxy = add_scalar(scale(sigmoid(slice(sel, 1, 0, 2)), T(2)), T(-0.5));
            auto s2 = scale(sigmoid(slice(sel, 1, 2, 4)), T(2));
            auto pwh = mul(mul(s2, s2), tape.constant(Tensor<T>({n, 2}, std::move(anchor_wh))));
            const std::array<Var<T>, 2> parts{pxy, pwh};
            auto pbox = concat(std::span<const Var<T>>(parts), 1);
            const Tensor<T> tbox_t({n, 4}, std::move(tbox));
            if (detached && !reuse) {
                auto& a = detached->alpha[k];
                const auto pv = pbox.value().data();
                for (std::size_t i = 0; i < n; ++i) {
                    const Box pb{static_cast<double>(pv[4 * i]), static_cast<double>(pv[4 * i + 1]),
                                 static_cast<double>(pv[4 * i + 2]), static_cast<double>(pv[4 * i + 3])};
                    const Box tb{static_cast<double>(tbox_t[4 * i]), static_cast<double>(tbox_t[4 * i + 1]),
                                 static_cast<double>(tbox_t[4 * i + 2]), static_cast<double>(tbox_t[4 * i + 3])};
                    a.push_back(ciou_terms(pb, tb).alpha);
                }
            }
            auto l = ciou_loss_rows(pbox, tbox_t, reuse ? &detached->alpha[k] : nullptr);
            box_terms.push_back(sum(l));
            const auto lv = l.value().data();
            for (std::size_t i = 0; i < n; ++i) {
                const T q = std::clamp(T(1) - lv[i], T(0), T(1));
                obj_target[slot[i]] = std::max(obj_target[slot[i]], q);
            }
            cls_terms.push_back(scale(bce_with_logits(slice(sel, 1, 5, no), Tensor<T>({n, nc}, std::move(onehot))), T(n)));
            out.matches += n;
        }

        if (reuse) {
            const auto& frozen = detached->obj_target[k];
            if (frozen.size() != obj_target.numel()) throw DimensionError("detection_loss: frozen objectness size mismatch");
            for (std::size_t i = 0; i < frozen.size(); ++i) obj_target[i] = static_cast<T>(frozen[i]);
        } else if (detached) {
            detached->obj_target[k].assign(obj_target.data().begin(), obj_target.data().end());
        }
        auto obj_logits = slice(reshape(head, {batch, 3, no, grid, grid}), 2, 4, 5);
        auto obj = scale(bce_with_logits(obj_logits, obj_target), static_cast<T>(kObjectnessBalance[k]));
        obj_total = obj_total.valid() ? add(obj_total, obj) : obj;
    }

    auto accumulate = [](const std::vector<Var<T>>& terms) {
        Var<T> s = terms[0];
        for (std::size_t i = 1; i < terms.size(); ++i) s = add(s, terms[i]);
        return s;
    };

    const T bs = static_cast<T>(batch);
    Var<T> total = scale(obj_total, static_cast<T>(weights.obj) * bs);
    out.obj = static_cast<double>(obj_total.value().item());
    if (out.matches > 0) {
        const T inv = T(1) / static_cast<T>(out.matches);
        auto box = scale(accumulate(box_terms), inv);
        auto cls = scale(accumulate(cls_terms), inv);
        out.box = static_cast<double>(box.value().item());
        out.cls = static_cast<double>(cls.value().item());
        total = add(total, add(scale(box, static_cast<T>(weights.box) * bs), scale(cls, static_cast<T>(weights.cls) * bs)));
    }
    out.total = total;
    if (detached) detached->frozen = true;
    return out;
}

template Var<float> ciou_loss_rows(const Var<float>&, const Tensor<float>&, const std::vector<double>*);
template Var<double> ciou_loss_rows(const Var<double>&, const Tensor<double>&, const std::vector<double>*);
template LossBreakdown<float> detection_loss(const std::vector<Var<float>>&, const std::vector<std::vector<GroundTruth>>&,
                                             const LossGeometry&, const LossWeights&, DetachedTerms*);
template LossBreakdown<double> detection_loss(const std::vector<Var<double>>&, const std::vector<std::vector<GroundTruth>>&,
                                              const LossGeometry&, const LossWeights&, DetachedTerms*);

}  // namespace ymask
