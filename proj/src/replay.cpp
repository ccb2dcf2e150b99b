#include "rd2/replay.hpp"

#include <algorithm>
#include <cmath>

namespace rd2::replay {

int Sequence::pad_count() const {
    int n = 0;
    for (const auto& t : transitions) {
        if (t.valid) break;
        ++n;
    }
    return n;
}

std::vector<Sequence> segment_episode(const std::vector<Transition>& episode,
                                      int m, std::uint64_t episode_id) {
    if (m < 2 || m % 2 != 0)
        throw ReplayError("sequence length must be even and >= 2");
    const int T = static_cast<int>(episode.size());
    if (T < 1) throw ReplayError("empty episode");

    std::vector<Sequence> out;
    if (T < m) {
        Sequence s;
        s.episode_id = episode_id;
        s.start_index = 0;
        s.transitions.assign(m - T, Transition{});
        for (auto& t : s.transitions) t.valid = false;
        s.transitions.insert(s.transitions.end(), episode.begin(), episode.end());
        out.push_back(std::move(s));
        return out;
    }

    const int stride = m / 2;
    std::vector<int> starts;
    for (int start = 0; start + m <= T; start += stride) starts.push_back(start);
    if (starts.back() != T - m) starts.push_back(T - m);

    for (int start : starts) {
        Sequence s;
        s.episode_id = episode_id;
        s.start_index = start;
        s.transitions.assign(episode.begin() + start, episode.begin() + start + m);
        out.push_back(std::move(s));
    }
    return out;
}

double compute_sequence_priority(const std::vector<double>& abs_td, double eta) {
    double mx = 0.0, sum = 0.0;
    int n = 0;
    for (double d : abs_td) {
        const double a = std::abs(d);
        mx = std::max(mx, a);
        sum += a;
        ++n;
    }
    if (n == 0) throw ReplayError("compute_sequence_priority: empty TD list");
    // mean + eta*(max - mean): same convex blend, one rounding step fewer
    // than eta*max + (1-eta)*mean
    const double mean = sum / n;
    return mean + eta * (mx - mean);
}

SumTree::SumTree(int capacity) : capacity_(capacity) {
    if (capacity < 1) throw ReplayError("sum tree capacity must be >= 1");
    base_ = 1;
    while (base_ < capacity_) base_ *= 2;
    nodes_.assign(static_cast<std::size_t>(2 * base_), 0.0);
}

void SumTree::set(int index, double priority) {
    if (index < 0 || index >= capacity_)
        throw ReplayError("sum tree index out of range");
    if (priority < 0.0 || !std::isfinite(priority))
        throw ReplayError("sum tree priority must be finite and >= 0");
    int i = base_ + index;
    nodes_[i] = priority;
    for (i /= 2; i >= 1; i /= 2)
        nodes_[i] = nodes_[2 * i] + nodes_[2 * i + 1];
    if (++updates_since_rebuild_ >= (1u << 17)) rebuild();
}

double SumTree::get(int index) const { return nodes_[base_ + index]; }

double SumTree::total() const { return nodes_[1]; }

int SumTree::find_prefix(double u) const {
    int i = 1;
    while (i < base_) {
        const double left = nodes_[2 * i];
        if (u < left) {
            i = 2 * i;
        } else {
            u -= left;
            i = 2 * i + 1;
        }
    }
    return std::min(i - base_, capacity_ - 1);
}

void SumTree::rebuild() {
    for (int i = base_ - 1; i >= 1; --i)
        nodes_[i] = nodes_[2 * i] + nodes_[2 * i + 1];
    updates_since_rebuild_ = 0;
}

DualPriorityBuffer::DualPriorityBuffer(int capacity, int sequence_length,
                                       double eta, double beta)
    : capacity_(capacity),
      m_(sequence_length),
      eta_(eta),
      beta_(beta),
      slots_(capacity),
      seq_tree_(capacity),
      trans_tree_(capacity * sequence_length) {
    if (capacity < 1) throw ReplayError("buffer capacity must be >= 1");
    if (m_ < 2 || m_ % 2 != 0)
        throw ReplayError("buffer sequence length must be even and >= 2");
}

void DualPriorityBuffer::store_locked(const Sequence& sequence) {
    if (sequence.length() != m_)
        throw ReplayError("sequence length does not match buffer configuration");
    const int slot = next_slot_;
    Slot& s = slots_[slot];
    if (s.occupied) {
        // FIFO eviction: drop the old sequence's mass from both trees in the
        // same critical section.
        for (const auto& t : s.seq.transitions)
            if (t.valid) --live_transitions_;
    } else {
        ++size_;
    }
    s.seq = sequence;
    s.insert_id = next_insert_id_++;
    s.occupied = true;

    seq_tree_.set(slot, max_priority_);
    for (int j = 0; j < m_; ++j) {
        const bool valid = sequence.transitions[j].valid;
        trans_tree_.set(slot * m_ + j, valid ? max_priority_ : 0.0);
        if (valid) ++live_transitions_;
    }
    next_slot_ = (next_slot_ + 1) % capacity_;
}

void DualPriorityBuffer::append(const Sequence& sequence) {
    std::lock_guard<std::mutex> lock(mutex_);
    store_locked(sequence);
}

void DualPriorityBuffer::append(const std::vector<Sequence>& sequences) {
    std::lock_guard<std::mutex> lock(mutex_);
    for (const auto& s : sequences) store_locked(s);
}

SampleBatch DualPriorityBuffer::sample(int batch_size,
                                       std::mt19937_64& rng) const {
    std::lock_guard<std::mutex> lock(mutex_);
    if (size_ == 0) throw ReplayError("cannot sample from an empty buffer");
    if (batch_size < 1) throw ReplayError("batch size must be >= 1");

    const double total = seq_tree_.total();
    if (total <= 0.0) throw ReplayError("buffer has zero total priority");

    SampleBatch batch;
    batch.sequences.reserve(batch_size);
    batch.handles.reserve(batch_size);
    batch.weights = MatrixXd::Zero(batch_size, m_);

    const double trans_total = trans_tree_.total();
    const double n_live = static_cast<double>(live_transitions_);

    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double stratum = total / batch_size;

    double max_w = 0.0;
    for (int b = 0; b < batch_size; ++b) {
        const double u = (b + unit(rng)) * stratum;
        const int slot = seq_tree_.find_prefix(std::min(u, std::nextafter(total, 0.0)));
        const Slot& s = slots_[slot];
        batch.sequences.push_back(s.seq);
        batch.handles.push_back({slot, s.insert_id});
        for (int j = 0; j < m_; ++j) {
            if (!s.seq.transitions[j].valid) continue;
            const double p = trans_tree_.get(slot * m_ + j);
            const double prob = p / trans_total;
            const double w = std::pow(n_live * prob, -beta_);
            batch.weights(b, j) = w;
            max_w = std::max(max_w, w);
        }
    }
    if (max_w > 0.0) batch.weights /= max_w;
    return batch;
}

void DualPriorityBuffer::update_priorities(
    const std::vector<SequenceHandle>& handles,
    const std::vector<double>& new_priorities,
    const std::vector<std::vector<double>>& abs_td) {
    if (handles.size() != new_priorities.size() || handles.size() != abs_td.size())
        throw ReplayError("update_priorities: argument length mismatch");
    std::lock_guard<std::mutex> lock(mutex_);
    for (std::size_t k = 0; k < handles.size(); ++k) {
        const SequenceHandle& h = handles[k];
        if (new_priorities[k] < 0.0)
            throw ReplayError("negative sequence priority");
        if (h.slot < 0 || h.slot >= capacity_ ||
            slots_[h.slot].insert_id != h.insert_id) {
            ++stale_updates_;  // evicted since sampling; skip
            continue;
        }
        const Slot& s = slots_[h.slot];
        const double p = std::max(new_priorities[k], kPriorityFloor);
        seq_tree_.set(h.slot, p);
        max_priority_ = std::max(max_priority_, p);
        if (static_cast<int>(abs_td[k].size()) != m_)
            throw ReplayError("update_priorities: TD list length mismatch");
        for (int j = 0; j < m_; ++j) {
            if (!s.seq.transitions[j].valid) continue;
            if (abs_td[k][j] < 0.0)
                throw ReplayError("negative transition priority");
            trans_tree_.set(h.slot * m_ + j,
                            std::max(abs_td[k][j], kPriorityFloor));
        }
    }
}

void DualPriorityBuffer::clear() {
    std::lock_guard<std::mutex> lock(mutex_);
    for (int i = 0; i < capacity_; ++i) {
        if (slots_[i].occupied) {
            seq_tree_.set(i, 0.0);
            for (int j = 0; j < m_; ++j) trans_tree_.set(i * m_ + j, 0.0);
        }
        slots_[i] = Slot{};
    }
    size_ = 0;
    next_slot_ = 0;
    live_transitions_ = 0;
    max_priority_ = 1.0;
}

int DualPriorityBuffer::size() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return size_;
}

BufferStats DualPriorityBuffer::stats() const {
    std::lock_guard<std::mutex> lock(mutex_);
    BufferStats st;
    st.fill = size_;
    st.capacity = capacity_;
    st.live_transitions = live_transitions_;
    st.stale_updates = stale_updates_;
    st.max_priority = max_priority_;
    st.seq_priority_total = seq_tree_.total();
    return st;
}

}  // namespace rd2::replay
