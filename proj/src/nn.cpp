#include "sepsisrl/nn.hpp"

#include <cmath>

namespace sepsisrl::nn {

Mlp Mlp::init(const std::vector<int>& dims, bool batch_norm, Rng& rng) {
    if (dims.size() < 2)
        throw ConfigError("Mlp::init: need at least input and output dims");
    for (int d : dims)
        if (d < 1) throw ConfigError("Mlp::init: layer dims must be >= 1");
    Mlp net;
    net.dims = dims;
    net.batch_norm = batch_norm;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        Dense layer;
        layer.weight.resize(dims[l + 1], dims[l]);
        const double scale = std::sqrt(2.0 / static_cast<double>(dims[l]));
        for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
            for (Eigen::Index c = 0; c < layer.weight.cols(); ++c)
                layer.weight(r, c) = scale * rng.normal();
        layer.bias = Eigen::VectorXd::Zero(dims[l + 1]);
        net.dense.push_back(std::move(layer));
    }
    if (batch_norm) {
        for (int h = 0; h < net.hidden_count(); ++h) {
            BatchNorm b;
            b.gamma = Eigen::VectorXd::Ones(dims[h + 1]);
            b.beta = Eigen::VectorXd::Zero(dims[h + 1]);
            b.running_mean = Eigen::VectorXd::Zero(dims[h + 1]);
            b.running_var = Eigen::VectorXd::Ones(dims[h + 1]);
            net.bn.push_back(std::move(b));
        }
    }
    return net;
}

long Mlp::param_count() const {
    long n = 0;
    for (const auto& d : dense) n += d.weight.size() + d.bias.size();
    for (const auto& b : bn) n += b.gamma.size() + b.beta.size();
    return n;
}

namespace {

Eigen::MatrixXd affine(const Eigen::MatrixXd& x, const Dense& d) {
    Eigen::MatrixXd z = x * d.weight.transpose();
    z.rowwise() += d.bias.transpose();
    return z;
}

} // namespace

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x) const {
    if (x.cols() != input_dim())
        throw ShapeError("Mlp::forward: input has " + std::to_string(x.cols()) +
                         " columns, expected " + std::to_string(input_dim()));
    Eigen::MatrixXd h = x;
    for (int l = 0; l < hidden_count(); ++l) {
        Eigen::MatrixXd z = affine(h, dense[l]);
        if (batch_norm) {
            const auto& b = bn[l];
            const Eigen::VectorXd invstd =
                (b.running_var.array() + kBatchNormEps).rsqrt().matrix();
            z.rowwise() -= b.running_mean.transpose();
            z = (z.array().rowwise() * (invstd.cwiseProduct(b.gamma)).transpose().array()).matrix();
            z.rowwise() += b.beta.transpose();
        }
        h = z.cwiseMax(0.0);
    }
    return affine(h, dense.back());
}

Eigen::MatrixXd Mlp::forward_train(const Eigen::MatrixXd& x, ForwardCache& cache,
                                   bool update_running) {
    if (x.cols() != input_dim())
        throw ShapeError("Mlp::forward_train: input dimension mismatch");
    if (x.rows() == 0)
        throw ShapeError("Mlp::forward_train: empty batch");
    if (batch_norm && x.rows() < 2)
        throw ShapeError("Mlp::forward_train: batch norm needs batches of >= 2 samples");

    const double m = static_cast<double>(x.rows());
    cache = ForwardCache{};
    Eigen::MatrixXd h = x;
    for (int l = 0; l < hidden_count(); ++l) {
        cache.layer_input.push_back(h);
        Eigen::MatrixXd z = affine(h, dense[l]);
        cache.pre_norm.push_back(z);
        if (batch_norm) {
            auto& b = bn[l];
            const Eigen::VectorXd mean = z.colwise().mean();
            Eigen::MatrixXd centered = z;
            centered.rowwise() -= mean.transpose();
            const Eigen::VectorXd var =
                centered.cwiseProduct(centered).colwise().sum().transpose() / m;
            const Eigen::VectorXd invstd = (var.array() + kBatchNormEps).rsqrt().matrix();
            Eigen::MatrixXd xhat =
                (centered.array().rowwise() * invstd.transpose().array()).matrix();
            if (update_running) {
                b.running_mean =
                    (1.0 - kBatchNormMomentum) * b.running_mean + kBatchNormMomentum * mean;
                b.running_var =
                    (1.0 - kBatchNormMomentum) * b.running_var + kBatchNormMomentum * var;
            }
            cache.batch_mean.push_back(mean);
            cache.batch_invstd.push_back(invstd);
            cache.normalized.push_back(xhat);
            z = (xhat.array().rowwise() * b.gamma.transpose().array()).matrix();
            z.rowwise() += b.beta.transpose();
        }
        h = z.cwiseMax(0.0);
        cache.activation.push_back(h);
    }
    cache.layer_input.push_back(h);
    cache.output = affine(h, dense.back());
    return cache.output;
}

Gradients Mlp::backward(const ForwardCache& cache, const Eigen::MatrixXd& d_output) const {
    if (d_output.rows() != cache.output.rows() || d_output.cols() != cache.output.cols())
        throw ShapeError("Mlp::backward: d_output shape mismatch");

    const int n_layers = static_cast<int>(dense.size());
    Gradients g;
    g.dweight.resize(n_layers);
    g.dbias.resize(n_layers);
    if (batch_norm) {
        g.dgamma.resize(bn.size());
        g.dbeta.resize(bn.size());
    }

    g.dweight[n_layers - 1] = d_output.transpose() * cache.layer_input[n_layers - 1];
    g.dbias[n_layers - 1] = d_output.colwise().sum().transpose();
    Eigen::MatrixXd d_h = d_output * dense[n_layers - 1].weight;

    for (int l = hidden_count() - 1; l >= 0; --l) {
        // through ReLU: activation > 0 exactly where pre-activation > 0
        Eigen::MatrixXd d_z =
            ((cache.activation[l].array() > 0.0).cast<double>() * d_h.array()).matrix();
        if (batch_norm) {
            const auto& b = bn[l];
            const Eigen::MatrixXd& xhat = cache.normalized[l];
            const double m = static_cast<double>(d_z.rows());
            g.dgamma[l] = d_z.cwiseProduct(xhat).colwise().sum().transpose();
            g.dbeta[l] = d_z.colwise().sum().transpose();
            const Eigen::MatrixXd d_xhat =
                (d_z.array().rowwise() * b.gamma.transpose().array()).matrix();
            const Eigen::VectorXd sum_dxhat = d_xhat.colwise().sum().transpose();
            const Eigen::VectorXd sum_dxhat_xhat =
                d_xhat.cwiseProduct(xhat).colwise().sum().transpose();
            Eigen::MatrixXd dz = m * d_xhat;
            dz.rowwise() -= sum_dxhat.transpose();
            dz -= (xhat.array().rowwise() * sum_dxhat_xhat.transpose().array()).matrix();
            dz = (dz.array().rowwise() * (cache.batch_invstd[l] / m).transpose().array()).matrix();
            d_z = dz;
        }
        g.dweight[l] = d_z.transpose() * cache.layer_input[l];
        g.dbias[l] = d_z.colwise().sum().transpose();
        if (l > 0) d_h = d_z * dense[l].weight;
    }
    return g;
}

Eigen::VectorXd Mlp::flatten_params() const {
    Eigen::VectorXd flat(param_count());
    Eigen::Index pos = 0;
    for (std::size_t l = 0; l < dense.size(); ++l) {
        const auto& d = dense[l];
        for (Eigen::Index r = 0; r < d.weight.rows(); ++r)
            for (Eigen::Index c = 0; c < d.weight.cols(); ++c) flat(pos++) = d.weight(r, c);
        flat.segment(pos, d.bias.size()) = d.bias;
        pos += d.bias.size();
        if (batch_norm && l < bn.size()) {
            flat.segment(pos, bn[l].gamma.size()) = bn[l].gamma;
            pos += bn[l].gamma.size();
            flat.segment(pos, bn[l].beta.size()) = bn[l].beta;
            pos += bn[l].beta.size();
        }
    }
    return flat;
}

void Mlp::unflatten_params(const Eigen::VectorXd& flat) {
    if (flat.size() != param_count())
        throw ShapeError("Mlp::unflatten_params: size mismatch");
    Eigen::Index pos = 0;
    for (std::size_t l = 0; l < dense.size(); ++l) {
        auto& d = dense[l];
        for (Eigen::Index r = 0; r < d.weight.rows(); ++r)
            for (Eigen::Index c = 0; c < d.weight.cols(); ++c) d.weight(r, c) = flat(pos++);
        d.bias = flat.segment(pos, d.bias.size());
        pos += d.bias.size();
        if (batch_norm && l < bn.size()) {
            bn[l].gamma = flat.segment(pos, bn[l].gamma.size());
            pos += bn[l].gamma.size();
            bn[l].beta = flat.segment(pos, bn[l].beta.size());
            pos += bn[l].beta.size();
        }
    }
}

Eigen::VectorXd Gradients::flatten() const {
    long n = 0;
    for (const auto& w : dweight) n += w.size();
    for (const auto& b : dbias) n += b.size();
    for (const auto& gam : dgamma) n += gam.size();
    for (const auto& b : dbeta) n += b.size();
    Eigen::VectorXd flat(n);
    Eigen::Index pos = 0;
    const bool has_bn = !dgamma.empty();
    for (std::size_t l = 0; l < dweight.size(); ++l) {
        for (Eigen::Index r = 0; r < dweight[l].rows(); ++r)
            for (Eigen::Index c = 0; c < dweight[l].cols(); ++c) flat(pos++) = dweight[l](r, c);
        flat.segment(pos, dbias[l].size()) = dbias[l];
        pos += dbias[l].size();
        if (has_bn && l < dgamma.size()) {
            flat.segment(pos, dgamma[l].size()) = dgamma[l];
            pos += dgamma[l].size();
            flat.segment(pos, dbeta[l].size()) = dbeta[l];
            pos += dbeta[l].size();
        }
    }
    return flat;
}

AdamState AdamState::init(long n_params, double learning_rate) {
    AdamState st;
    st.m = Eigen::VectorXd::Zero(n_params);
    st.v = Eigen::VectorXd::Zero(n_params);
    st.learning_rate = learning_rate;
    return st;
}

void adam_step(Eigen::VectorXd& params, const Eigen::VectorXd& grads, AdamState& state) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw ShapeError("adam_step: parameter/gradient/state size mismatch");
    state.step += 1;
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads;
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads.cwiseProduct(grads).eval();
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    const Eigen::ArrayXd mhat = state.m.array() / bc1;
    const Eigen::ArrayXd vhat = state.v.array() / bc2;
    params.array() -= state.learning_rate * mhat / (vhat.sqrt() + state.epsilon);
}

double mse_loss(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target,
                Eigen::MatrixXd* d_pred) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols())
        throw ShapeError("mse_loss: prediction/target shape mismatch");
    const double denom = static_cast<double>(pred.rows()) * static_cast<double>(pred.cols());
    const Eigen::MatrixXd diff = pred - target;
    if (d_pred) *d_pred = 2.0 / denom * diff;
    return diff.array().square().sum() / denom;
}

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits) {
    Eigen::MatrixXd shifted = logits;
    shifted.colwise() -= logits.rowwise().maxCoeff();
    Eigen::MatrixXd expd = shifted.array().exp().matrix();
    const Eigen::VectorXd norm = expd.rowwise().sum();
    return (expd.array().colwise() / norm.array()).matrix();
}

double cross_entropy_loss(const Eigen::MatrixXd& logits, const std::vector<int>& labels,
                          Eigen::MatrixXd* d_logits) {
    if (static_cast<std::size_t>(logits.rows()) != labels.size())
        throw ShapeError("cross_entropy_loss: batch size mismatch");
    const Eigen::MatrixXd proba = softmax_rows(logits);
    const double n = static_cast<double>(logits.rows());
    double loss = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= logits.cols())
            throw DomainError("cross_entropy_loss: label " + std::to_string(y) + " out of range");
        loss -= std::log(std::max(proba(i, y), 1e-12));
    }
    loss /= n;
    if (d_logits) {
        *d_logits = proba / n;
        for (Eigen::Index i = 0; i < logits.rows(); ++i)
            (*d_logits)(i, labels[static_cast<std::size_t>(i)]) -= 1.0 / n;
    }
    return loss;
}

} // namespace sepsisrl::nn
