#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <condition_variable>
#include <cstddef>
#include <deque>
#include <exception>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <stdexcept>
#include <string>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>

#include "jump.hpp"
#include "linalg.hpp"

namespace ieti {

struct RuntimeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Raised inside workers blocked on communication after another worker
/// failed; WorkerGroup::run() swallows these and rethrows the root cause.
struct WorkerAbort : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Message tags partition traffic classes in the log.
namespace msg {
inline constexpr int knotData = 1;       ///< neighbor trace data exchange (assembling)
inline constexpr int halo = 2;           ///< accumulate shared-multiplier exchange
inline constexpr int dotPartial = 3;     ///< scalar product partials to rank 0
inline constexpr int dotResult = 4;      ///< scalar product broadcast leg
inline constexpr int primalGather = 5;   ///< slave -> master primal contributions
inline constexpr int primalForward = 6;  ///< master -> first master forwarding
inline constexpr int primalResult = 7;   ///< first master -> masters result leg
inline constexpr int primalScatter = 8;  ///< master -> slave primal entries
inline constexpr int coarseGather = 9;   ///< coarse matrix blocks to holders
inline constexpr int general = 10;       ///< miscellaneous payloads
} // namespace msg

/// One logged message. `seq` is the global emission order under the log lock.
struct MessageRecord {
    std::string phase;
    int src = -1;
    int dst = -1;
    int tag = 0;
    std::size_t bytes = 0;
    std::size_t seq = 0;
};

/// @brief Pairwise FIFO message channels between workers plus a byte-counting
/// log. Messages with equal (src, dst, tag) are delivered in send order;
/// self-sends short-circuit as local copies and are not logged.
class MessageBoard {
public:
    explicit MessageBoard(int workers)
    {
        if (workers < 1)
            throw RuntimeError("MessageBoard: worker count must be at least 1");
        m_inbox.reserve(workers);
        for (int i = 0; i < workers; ++i)
            m_inbox.push_back(std::make_unique<Inbox>());
    }

    int workerCount() const { return static_cast<int>(m_inbox.size()); }

    void send(int src, int dst, int tag, std::vector<double> payload, const std::string& phase)
    {
        checkRank(src);
        checkRank(dst);
        if (m_poisoned.load())
            throw WorkerAbort("send: group aborted");
        if (src != dst) {
            std::lock_guard<std::mutex> lk(m_logMutex);
            m_log.push_back({phase, src, dst, tag, 8 * payload.size(), m_seq++});
        }
        Inbox& box = *m_inbox[dst];
        {
            std::lock_guard<std::mutex> lk(box.m);
            box.q.push_back({src, tag, std::move(payload)});
        }
        box.cv.notify_all();
    }

    std::vector<double> recv(int dst, int src, int tag)
    {
        checkRank(src);
        checkRank(dst);
        Inbox& box = *m_inbox[dst];
        std::unique_lock<std::mutex> lk(box.m);
        for (;;) {
            if (m_poisoned.load())
                throw WorkerAbort("recv: group aborted");
            for (auto it = box.q.begin(); it != box.q.end(); ++it) {
                if (it->src == src && it->tag == tag) {
                    std::vector<double> payload = std::move(it->payload);
                    box.q.erase(it);
                    return payload;
                }
            }
            box.cv.wait(lk);
        }
    }

    /// Wake every blocked receiver with WorkerAbort; the board stays dead.
    void poison()
    {
        m_poisoned.store(true);
        for (auto& box : m_inbox) {
            std::lock_guard<std::mutex> lk(box->m);
            box->cv.notify_all();
        }
    }

    bool poisoned() const { return m_poisoned.load(); }

    /// Records sorted by (src, dst, tag, emission order); call after run().
    std::vector<MessageRecord> records() const
    {
        std::lock_guard<std::mutex> lk(m_logMutex);
        std::vector<MessageRecord> out = m_log;
        std::sort(out.begin(), out.end(), [](const MessageRecord& a, const MessageRecord& b) {
            return std::tie(a.src, a.dst, a.tag, a.seq) < std::tie(b.src, b.dst, b.tag, b.seq);
        });
        return out;
    }

    std::size_t messageCount() const
    {
        std::lock_guard<std::mutex> lk(m_logMutex);
        return m_log.size();
    }

    std::size_t totalBytes() const
    {
        std::lock_guard<std::mutex> lk(m_logMutex);
        std::size_t n = 0;
        for (const auto& r : m_log)
            n += r.bytes;
        return n;
    }

    struct PhaseStats {
        std::size_t count = 0;
        std::size_t bytes = 0;
    };

    std::map<std::string, PhaseStats> phaseStats() const
    {
        std::lock_guard<std::mutex> lk(m_logMutex);
        std::map<std::string, PhaseStats> out;
        for (const auto& r : m_log) {
            out[r.phase].count += 1;
            out[r.phase].bytes += r.bytes;
        }
        return out;
    }

    /// Line-delimited records: {"phase":...,"src":...,"dst":...,"tag":...,"bytes":...}
    void dump(std::ostream& os) const
    {
        for (const auto& r : records())
            os << "{\"phase\":\"" << r.phase << "\",\"src\":" << r.src << ",\"dst\":" << r.dst
               << ",\"tag\":" << r.tag << ",\"bytes\":" << r.bytes << "}\n";
    }

    void clearLog()
    {
        std::lock_guard<std::mutex> lk(m_logMutex);
        m_log.clear();
    }

private:
    struct Message {
        int src;
        int tag;
        std::vector<double> payload;
    };
    struct Inbox {
        std::mutex m;
        std::condition_variable cv;
        std::deque<Message> q;
    };

    void checkRank(int r) const
    {
        if (r < 0 || r >= workerCount())
            throw RuntimeError("MessageBoard: rank out of range");
    }

    std::vector<std::unique_ptr<Inbox>> m_inbox;
    std::atomic<bool> m_poisoned{false};
    mutable std::mutex m_logMutex;
    std::vector<MessageRecord> m_log;
    std::size_t m_seq = 0;
};

struct RuntimeConfig {
    int workers = 1;
    int holders = 1;
    /// Fixed global-patch-order reduction folds (bitwise invariant across
    /// worker and holder counts); off = per-hop pre-summed payloads for
    /// timing studies only.
    bool deterministic = true;
    /// Holder-consistency checks during scatter (debug aid).
    bool validate = false;
};

class WorkerContext;

/// @brief Worker pool with a deterministic contiguous patch partition and a
/// holder-group topology: workers are grouped into contiguous blocks, the
/// first worker of each block is its master, and the masters are exactly the
/// coarse-problem holders.
class WorkerGroup {
public:
    WorkerGroup(RuntimeConfig cfg, int numPatches)
        : m_cfg(cfg), m_numPatches(numPatches), m_board(std::max(cfg.workers, 1))
    {
        if (cfg.workers < 1)
            throw RuntimeError("WorkerGroup: worker count must be at least 1");
        if (cfg.holders < 1)
            throw RuntimeError("WorkerGroup: holder set must not be empty");
        if (cfg.holders > cfg.workers)
            throw RuntimeError("WorkerGroup: holder count exceeds worker count");
        if (numPatches < 0)
            throw RuntimeError("WorkerGroup: negative patch count");

        m_patches.resize(cfg.workers);
        m_ownerOf.assign(numPatches, -1);
        const int base = cfg.workers > 0 ? numPatches / cfg.workers : 0;
        const int rem = cfg.workers > 0 ? numPatches % cfg.workers : 0;
        int next = 0;
        for (int q = 0; q < cfg.workers; ++q) {
            const int count = base + (q < rem ? 1 : 0);
            for (int i = 0; i < count; ++i) {
                m_patches[q].push_back(next);
                m_ownerOf[next] = q;
                ++next;
            }
        }

        m_masterOf.assign(cfg.workers, -1);
        const int gBase = cfg.workers / cfg.holders;
        const int gRem = cfg.workers % cfg.holders;
        int w = 0;
        for (int g = 0; g < cfg.holders; ++g) {
            const int count = gBase + (g < gRem ? 1 : 0);
            const int master = w;
            m_holders.push_back(master);
            m_groups[master] = {};
            for (int i = 0; i < count; ++i) {
                m_masterOf[w] = master;
                m_groups[master].push_back(w);
                ++w;
            }
        }
    }

    const RuntimeConfig& config() const { return m_cfg; }
    int workerCount() const { return m_cfg.workers; }
    int numPatches() const { return m_numPatches; }

    int ownerOf(int patch) const { return m_ownerOf.at(patch); }
    const std::vector<int>& patches(int worker) const { return m_patches.at(worker); }

    int masterOf(int worker) const { return m_masterOf.at(worker); }
    bool isHolder(int worker) const { return masterOf(worker) == worker; }
    const std::vector<int>& holders() const { return m_holders; }
    const std::vector<int>& groupOf(int master) const { return m_groups.at(master); }

    MessageBoard& board() { return m_board; }
    const MessageBoard& board() const { return m_board; }

    /// Launch one thread per worker running fn(WorkerContext&). The first
    /// exception poisons the board, blocked peers abort, and the root cause
    /// is rethrown here after all threads joined.
    template <class Fn>
    void run(Fn&& fn);

    /// Synchronization point; throws WorkerAbort once the group is poisoned.
    void barrier()
    {
        std::unique_lock<std::mutex> lk(m_barrierMutex);
        if (m_board.poisoned())
            throw WorkerAbort("barrier: group aborted");
        if (++m_barrierCount == m_cfg.workers) {
            m_barrierCount = 0;
            ++m_barrierGen;
            m_barrierCv.notify_all();
            return;
        }
        const long gen = m_barrierGen;
        m_barrierCv.wait(lk, [&] { return m_barrierGen != gen || m_board.poisoned(); });
        if (m_barrierGen == gen && m_board.poisoned())
            throw WorkerAbort("barrier: group aborted");
    }

private:
    void abortAll()
    {
        m_board.poison();
        {
            std::lock_guard<std::mutex> lk(m_barrierMutex);
        }
        m_barrierCv.notify_all();
    }

    RuntimeConfig m_cfg;
    int m_numPatches;
    MessageBoard m_board;
    std::vector<std::vector<int>> m_patches;
    std::vector<int> m_ownerOf;
    std::vector<int> m_masterOf;
    std::vector<int> m_holders;
    std::map<int, std::vector<int>> m_groups;

    std::mutex m_barrierMutex;
    std::condition_variable m_barrierCv;
    int m_barrierCount = 0;
    long m_barrierGen = 0;
};

/// Issued receive; the payload materializes on wait().
class Pending {
public:
    Pending(MessageBoard& board, int dst, int src, int tag)
        : m_board(&board), m_dst(dst), m_src(src), m_tag(tag)
    {
    }

    std::vector<double> wait() { return m_board->recv(m_dst, m_src, m_tag); }

private:
    MessageBoard* m_board;
    int m_dst, m_src, m_tag;
};

/// @brief Per-worker face of the group: identity, owned patches, messaging
/// with phase-tagged logging, and the basic collectives. All collective
/// calls must be executed by every worker of the group.
class WorkerContext {
public:
    WorkerContext(WorkerGroup& group, int rank) : m_group(group), m_rank(rank) {}

    WorkerGroup& group() { return m_group; }
    int rank() const { return m_rank; }
    int workerCount() const { return m_group.workerCount(); }
    const std::vector<int>& ownedPatches() const { return m_group.patches(m_rank); }
    bool deterministic() const { return m_group.config().deterministic; }

    void setPhase(std::string phase) { m_phase = std::move(phase); }
    const std::string& phase() const { return m_phase; }

    void barrier() { m_group.barrier(); }

    void send(int dst, int tag, std::vector<double> payload)
    {
        m_group.board().send(m_rank, dst, tag, std::move(payload), m_phase);
    }

    std::vector<double> recv(int src, int tag) { return m_group.board().recv(m_rank, src, tag); }

    Pending irecv(int src, int tag) { return Pending(m_group.board(), m_rank, src, tag); }

    /// Deterministic sum over workers: rank-ordered fold at rank 0, result
    /// broadcast to all.
    double allreduceSum(double x)
    {
        const int q = m_rank;
        const int n = workerCount();
        if (n == 1)
            return x;
        if (q != 0) {
            send(0, msg::dotPartial, {x});
            return recv(0, msg::dotResult)[0];
        }
        double total = x;
        for (int r = 1; r < n; ++r)
            total += recv(r, msg::dotPartial)[0];
        for (int r = 1; r < n; ++r)
            send(r, msg::dotResult, {total});
        return total;
    }

    std::vector<double> broadcast(int root, std::vector<double> data)
    {
        const int n = workerCount();
        if (m_rank == root) {
            for (int r = 0; r < n; ++r)
                if (r != root)
                    send(r, msg::general, data);
            return data;
        }
        return recv(root, msg::general);
    }

private:
    WorkerGroup& m_group;
    int m_rank;
    std::string m_phase = "setup";
};

template <class Fn>
void WorkerGroup::run(Fn&& fn)
{
    std::vector<std::thread> threads;
    threads.reserve(m_cfg.workers);
    std::exception_ptr first;
    std::mutex firstMutex;
    for (int q = 0; q < m_cfg.workers; ++q) {
        threads.emplace_back([this, &fn, &first, &firstMutex, q] {
            try {
                WorkerContext ctx(*this, q);
                fn(ctx);
            } catch (const WorkerAbort&) {
            } catch (...) {
                {
                    std::lock_guard<std::mutex> lk(firstMutex);
                    if (!first)
                        first = std::current_exception();
                }
                abortAll();
            }
        });
    }
    for (auto& t : threads)
        t.join();
    if (first)
        std::rethrow_exception(first);
}

/// @brief Patch-wise slices of B and B_D plus the shared-multiplier tables:
/// for each patch the ascending list of global multiplier ids touching it
/// (the local-to-global index table), the B entries against those segment
/// positions, and per multiplier its one or two (patch, position) touchpoints
/// in ascending patch order.
class MultiplierLayout {
public:
    struct Entry {
        int pos;       ///< position in the patch segment
        int local;     ///< patch-local dof
        double value;  ///< B coefficient
        double scaled; ///< B_D coefficient
    };
    struct Touch {
        int patch = -1;
        int pos = -1;
    };

    MultiplierLayout(const JumpOperators& jump, int numPatches) : m_numPatches(numPatches)
    {
        const auto& rows = jump.rows();
        const auto& scaled = jump.scaledRows();
        m_patchRows.resize(numPatches);
        m_entries.resize(numPatches);
        m_touches.resize(rows.size());
        m_touchCount.resize(rows.size());

        std::vector<std::vector<int>> rowSets(numPatches);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            checkPatch(rows[r].patchA);
            checkPatch(rows[r].patchB);
            rowSets[rows[r].patchA].push_back(static_cast<int>(r));
            if (rows[r].patchB != rows[r].patchA)
                rowSets[rows[r].patchB].push_back(static_cast<int>(r));
        }
        std::vector<std::map<int, int>> posOf(numPatches);
        for (int k = 0; k < numPatches; ++k) {
            std::sort(rowSets[k].begin(), rowSets[k].end());
            m_patchRows[k] = rowSets[k];
            for (std::size_t i = 0; i < rowSets[k].size(); ++i)
                posOf[k][rowSets[k][i]] = static_cast<int>(i);
        }
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const JumpRow& b = rows[r];
            const JumpRow& bd = scaled[r];
            if (b.patchA != bd.patchA || b.localA != bd.localA || b.patchB != bd.patchB ||
                b.localB != bd.localB)
                throw RuntimeError("MultiplierLayout: scaled rows do not pair the plain rows");
            const int posA = posOf[b.patchA].at(static_cast<int>(r));
            const int posB = posOf[b.patchB].at(static_cast<int>(r));
            m_entries[b.patchA].push_back({posA, b.localA, b.valueA, bd.valueA});
            m_entries[b.patchB].push_back({posB, b.localB, b.valueB, bd.valueB});
            if (b.patchA == b.patchB) {
                m_touches[r] = {Touch{b.patchA, posA}, Touch{}};
                m_touchCount[r] = 1;
            } else if (b.patchA < b.patchB) {
                m_touches[r] = {Touch{b.patchA, posA}, Touch{b.patchB, posB}};
                m_touchCount[r] = 2;
            } else {
                m_touches[r] = {Touch{b.patchB, posB}, Touch{b.patchA, posA}};
                m_touchCount[r] = 2;
            }
        }
    }

    int numMultipliers() const { return static_cast<int>(m_touches.size()); }
    int numPatches() const { return m_numPatches; }

    /// Ascending global multiplier ids touching patch k.
    const std::vector<int>& patchRows(int k) const { return m_patchRows.at(k); }
    int segmentSize(int k) const { return static_cast<int>(m_patchRows.at(k).size()); }
    /// B entries of patch k in ascending multiplier order.
    const std::vector<Entry>& entries(int k) const { return m_entries.at(k); }

    /// Touchpoints of one multiplier, ascending patch order; second entry
    /// unset when the row couples two dofs of a single patch.
    const std::array<Touch, 2>& touches(int row) const { return m_touches.at(row); }
    int touchCount(int row) const { return m_touchCount.at(row); }

    /// seg += B_k w (scaled: B_D,k).
    void addB(int k, const Vector& w, Vector& seg, bool useScaled = false) const
    {
        for (const Entry& e : m_entries.at(k))
            seg[e.pos] += (useScaled ? e.scaled : e.value) * w[e.local];
    }

    /// w += B_k^T seg (scaled: B_D,k^T); seg must be accumulated.
    void addBT(int k, const Vector& seg, Vector& w, bool useScaled = false) const
    {
        for (const Entry& e : m_entries.at(k))
            w[e.local] += (useScaled ? e.scaled : e.value) * seg[e.pos];
    }

private:
    void checkPatch(int k) const
    {
        if (k < 0 || k >= m_numPatches)
            throw RuntimeError("MultiplierLayout: row patch out of range");
    }

    int m_numPatches;
    std::vector<std::vector<int>> m_patchRows;
    std::vector<std::vector<Entry>> m_entries;
    std::vector<std::array<Touch, 2>> m_touches;
    std::vector<int> m_touchCount;
};

enum class Rep { Accumulated, Distributed };

/// @brief Worker-local multiplier vector: one segment per owned patch plus a
/// representation tag. Accumulated: every copy of a shared entry equals the
/// global value. Distributed: the global value is the sum over copies.
class DVector {
public:
    DVector() = default;
    DVector(Rep rep, std::vector<Vector> segments) : m_rep(rep), m_segs(std::move(segments)) {}

    static DVector zeros(Rep rep, const MultiplierLayout& layout, const std::vector<int>& owned)
    {
        std::vector<Vector> segs;
        segs.reserve(owned.size());
        for (int k : owned)
            segs.push_back(Vector::Zero(layout.segmentSize(k)));
        return DVector(rep, std::move(segs));
    }

    Rep rep() const { return m_rep; }
    int segments() const { return static_cast<int>(m_segs.size()); }
    Vector& seg(int i) { return m_segs.at(i); }
    const Vector& seg(int i) const { return m_segs.at(i); }

private:
    Rep m_rep = Rep::Distributed;
    std::vector<Vector> m_segs;
};

/// A zero vector is valid in either representation; the pcg iterate seed is
/// tagged accumulated.
inline DVector pcgZeroLike(const DVector& v)
{
    std::vector<Vector> segs;
    segs.reserve(v.segments());
    for (int i = 0; i < v.segments(); ++i)
        segs.push_back(Vector::Zero(v.seg(i).size()));
    return DVector(Rep::Accumulated, std::move(segs));
}

inline void pcgAxpy(DVector& y, double a, const DVector& x)
{
    if (y.rep() != x.rep())
        throw RuntimeError("pcgAxpy: representation mismatch");
    for (int i = 0; i < y.segments(); ++i)
        y.seg(i) += a * x.seg(i);
}

/// p = s + beta p
inline void pcgScaleAdd(DVector& p, double beta, const DVector& s)
{
    if (p.rep() != s.rep())
        throw RuntimeError("pcgScaleAdd: representation mismatch");
    for (int i = 0; i < p.segments(); ++i)
        p.seg(i) = s.seg(i) + beta * p.seg(i);
}

/// @brief Exchange plan binding a multiplier layout to a worker partition:
/// per worker the multiplier rows whose two touchpoints both live on it, and
/// per neighboring worker the ascending-ordered shared rows. Segments are
/// addressed by owned-patch index.
class HaloPlan {
public:
    struct InternalPair {
        int segA, posA; ///< lower-patch touchpoint
        int segB, posB;
    };
    struct HaloEntry {
        int seg;      ///< owned-patch index of my touchpoint
        int pos;      ///< segment position of my touchpoint
        bool mineLow; ///< my patch is the lower of the pair
    };
    struct NeighborHalo {
        int neighbor;
        std::vector<HaloEntry> entries; ///< ascending multiplier order
    };

    HaloPlan(const MultiplierLayout& layout, const WorkerGroup& group)
    {
        const int Q = group.workerCount();
        m_internal.resize(Q);
        m_halos.resize(Q);
        std::vector<std::map<int, std::vector<HaloEntry>>> halos(Q);

        std::vector<std::map<int, int>> ownedIndex(Q);
        for (int q = 0; q < Q; ++q) {
            const auto& owned = group.patches(q);
            for (std::size_t i = 0; i < owned.size(); ++i)
                ownedIndex[q][owned[i]] = static_cast<int>(i);
        }

        for (int r = 0; r < layout.numMultipliers(); ++r) {
            const auto& t = layout.touches(r);
            if (layout.touchCount(r) == 1)
                continue;
            const int qa = group.ownerOf(t[0].patch);
            const int qb = group.ownerOf(t[1].patch);
            const int segA = ownedIndex[qa].at(t[0].patch);
            const int segB = ownedIndex[qb].at(t[1].patch);
            if (qa == qb) {
                m_internal[qa].push_back({segA, t[0].pos, segB, t[1].pos});
            } else {
                halos[qa][qb].push_back({segA, t[0].pos, true});
                halos[qb][qa].push_back({segB, t[1].pos, false});
            }
        }
        for (int q = 0; q < Q; ++q)
            for (auto& [nbr, entries] : halos[q])
                m_halos[q].push_back({nbr, std::move(entries)});
    }

    const std::vector<InternalPair>& internal(int worker) const { return m_internal.at(worker); }
    /// Ascending neighbor rank.
    const std::vector<NeighborHalo>& halos(int worker) const { return m_halos.at(worker); }

private:
    std::vector<std::vector<InternalPair>> m_internal;
    std::vector<std::vector<NeighborHalo>> m_halos;
};

/// @brief Replace every shared multiplier entry by the sum of its copies via
/// pairwise neighbor exchange; copies are summed in ascending patch order, so
/// the result does not depend on the partition. Collective.
inline DVector accumulate(WorkerContext& ctx, const HaloPlan& plan, const DVector& v)
{
    if (v.rep() != Rep::Distributed)
        throw RuntimeError("accumulate: operand must be distributed");
    const int q = ctx.rank();
    std::vector<Vector> segs;
    segs.reserve(v.segments());
    for (int i = 0; i < v.segments(); ++i)
        segs.push_back(v.seg(i));
    DVector out(Rep::Accumulated, std::move(segs));

    for (const auto& pr : plan.internal(q)) {
        const double s = v.seg(pr.segA)[pr.posA] + v.seg(pr.segB)[pr.posB];
        out.seg(pr.segA)[pr.posA] = s;
        out.seg(pr.segB)[pr.posB] = s;
    }
    for (const auto& h : plan.halos(q)) {
        std::vector<double> buf(h.entries.size());
        for (std::size_t i = 0; i < h.entries.size(); ++i)
            buf[i] = v.seg(h.entries[i].seg)[h.entries[i].pos];
        ctx.send(h.neighbor, msg::halo, std::move(buf));
    }
    for (const auto& h : plan.halos(q)) {
        const std::vector<double> theirs = ctx.recv(h.neighbor, msg::halo);
        if (theirs.size() != h.entries.size())
            throw RuntimeError("accumulate: halo size mismatch");
        for (std::size_t i = 0; i < h.entries.size(); ++i) {
            const HaloPlan::HaloEntry& e = h.entries[i];
            const double mine = v.seg(e.seg)[e.pos];
            out.seg(e.seg)[e.pos] = e.mineLow ? mine + theirs[i] : theirs[i] + mine;
        }
    }
    return out;
}

/// @brief Scalar product of a distributed and an accumulated operand:
/// per-patch partial dots folded in global patch order at rank 0 and
/// broadcast, so the value is identical on every worker and independent of
/// the partition. Fast mode folds one pre-summed partial per worker instead.
/// Collective.
inline double ddot(WorkerContext& ctx, const DVector& u, const DVector& v)
{
    if (u.rep() == v.rep())
        throw RuntimeError("ddot: operands must mix representations");
    if (u.segments() != v.segments())
        throw RuntimeError("ddot: segment count mismatch");
    const int q = ctx.rank();
    const int n = ctx.workerCount();

    std::vector<double> partials(u.segments());
    for (int i = 0; i < u.segments(); ++i)
        partials[i] = u.seg(i).dot(v.seg(i));

    if (n == 1) {
        double total = 0.0;
        for (double p : partials)
            total += p;
        return total;
    }

    if (!ctx.deterministic()) {
        double mine = 0.0;
        for (double p : partials)
            mine += p;
        return ctx.allreduceSum(mine);
    }

    if (q != 0) {
        ctx.send(0, msg::dotPartial, std::move(partials));
        return ctx.recv(0, msg::dotResult)[0];
    }
    double total = 0.0;
    for (double p : partials)
        total += p;
    for (int r = 1; r < n; ++r)
        for (double p : ctx.recv(r, msg::dotPartial))
            total += p;
    for (int r = 1; r < n; ++r)
        ctx.send(r, msg::dotResult, {total});
    return total;
}

/// @brief Sum full-length primal contribution vectors, one per owned patch,
/// onto the holder workers. Message topology: slaves reduce to their master,
/// masters all-reduce among themselves (realized as gather to the first
/// master plus result legs). Deterministic mode folds the per-patch vectors
/// in global patch order at the first master, so holder results are bitwise
/// identical across worker and holder counts; fast mode pre-sums per hop.
/// Returns the assembled vector on holders, an empty vector elsewhere.
/// Collective.
inline Vector reducePrimal(WorkerContext& ctx, const std::vector<Vector>& mine, int n)
{
    WorkerGroup& g = ctx.group();
    const int q = ctx.rank();
    if (static_cast<int>(mine.size()) != static_cast<int>(ctx.ownedPatches().size()))
        throw RuntimeError("reducePrimal: one contribution per owned patch required");
    for (const Vector& v : mine)
        if (v.size() != n)
            throw RuntimeError("reducePrimal: contributions must have full primal length");
    const bool det = ctx.deterministic();
    const int master = g.masterOf(q);

    auto packPatches = [&](const std::vector<const Vector*>& vecs) {
        std::vector<double> buf;
        buf.reserve(vecs.size() * static_cast<std::size_t>(n));
        for (const Vector* v : vecs)
            buf.insert(buf.end(), v->data(), v->data() + v->size());
        return buf;
    };
    auto presum = [&](const std::vector<const Vector*>& vecs) {
        Vector s = Vector::Zero(n);
        for (const Vector* v : vecs)
            s += *v;
        return s;
    };

    std::vector<const Vector*> myVecs;
    for (const Vector& v : mine)
        myVecs.push_back(&v);

    if (q != master) {
        if (det) {
            ctx.send(master, msg::primalGather, packPatches(myVecs));
        } else {
            const Vector s = presum(myVecs);
            ctx.send(master, msg::primalGather, std::vector<double>(s.data(), s.data() + n));
        }
        return Vector();
    }

    // Master: collect the group block in rank order (= ascending patch order).
    std::vector<Vector> groupVecs;
    for (const Vector& v : mine)
        groupVecs.push_back(v);
    for (int s : g.groupOf(master)) {
        if (s == master)
            continue;
        const std::vector<double> buf = ctx.recv(s, msg::primalGather);
        if (det) {
            if (buf.size() != g.patches(s).size() * static_cast<std::size_t>(n))
                throw RuntimeError("reducePrimal: gathered block size mismatch");
            for (std::size_t i = 0; i < g.patches(s).size(); ++i)
                groupVecs.push_back(Eigen::Map<const Vector>(buf.data() + i * n, n));
        } else {
            groupVecs.push_back(Eigen::Map<const Vector>(buf.data(), n));
        }
    }

    const std::vector<int>& holders = g.holders();
    const int firstMaster = holders.front();
    if (q != firstMaster) {
        std::vector<const Vector*> ptrs;
        for (const Vector& v : groupVecs)
            ptrs.push_back(&v);
        if (det) {
            ctx.send(firstMaster, msg::primalForward, packPatches(ptrs));
        } else {
            const Vector s = presum(ptrs);
            ctx.send(firstMaster, msg::primalForward, std::vector<double>(s.data(), s.data() + n));
        }
        const std::vector<double> res = ctx.recv(firstMaster, msg::primalResult);
        return Eigen::Map<const Vector>(res.data(), n);
    }

    // First master: flat fold over all contributions in global patch order.
    Vector total = Vector::Zero(n);
    for (const Vector& v : groupVecs)
        total += v;
    for (std::size_t h = 1; h < holders.size(); ++h) {
        const int m = holders[h];
        const std::vector<double> buf = ctx.recv(m, msg::primalForward);
        if (det) {
            std::size_t patchCount = 0;
            for (int s : g.groupOf(m))
                patchCount += g.patches(s).size();
            if (buf.size() != patchCount * static_cast<std::size_t>(n))
                throw RuntimeError("reducePrimal: forwarded block size mismatch");
            for (std::size_t i = 0; i < patchCount; ++i)
                total += Eigen::Map<const Vector>(buf.data() + i * n, n);
        } else {
            total += Eigen::Map<const Vector>(buf.data(), n);
        }
    }
    for (std::size_t h = 1; h < holders.size(); ++h)
        ctx.send(holders[h], msg::primalResult, std::vector<double>(total.data(), total.data() + n));
    return total;
}

/// @brief Distribute the holder-resident primal vector: each worker receives
/// exactly the entries of its patches (per-patch subvectors at the given
/// global-id tables). Holders extract locally and serve their slaves; with
/// every worker a holder no messages are sent. Collective.
inline std::vector<Vector> scatterPrimal(WorkerContext& ctx,
                                         const std::vector<std::vector<int>>& gids,
                                         const Vector& wPi)
{
    WorkerGroup& g = ctx.group();
    const int q = ctx.rank();
    const int master = g.masterOf(q);

    auto extract = [&](int patch) {
        const auto& ids = gids.at(patch);
        Vector sub(ids.size());
        for (std::size_t i = 0; i < ids.size(); ++i)
            sub[i] = wPi[ids[i]];
        return sub;
    };

    if (q == master) {
        if (g.config().validate && g.holders().size() > 1) {
            // Debug consistency check: holder copies must agree bitwise.
            const int firstMaster = g.holders().front();
            if (q != firstMaster) {
                ctx.send(firstMaster, msg::general,
                         std::vector<double>(wPi.data(), wPi.data() + wPi.size()));
            } else {
                for (std::size_t h = 1; h < g.holders().size(); ++h) {
                    const std::vector<double> other = ctx.recv(g.holders()[h], msg::general);
                    bool same = other.size() == static_cast<std::size_t>(wPi.size());
                    for (std::size_t i = 0; same && i < other.size(); ++i)
                        same = other[i] == wPi[i];
                    if (!same)
                        throw RuntimeError("scatterPrimal: holder data divergence");
                }
            }
        }
        for (int s : g.groupOf(master)) {
            if (s == master)
                continue;
            std::vector<double> block;
            for (int patch : g.patches(s)) {
                const Vector sub = extract(patch);
                block.insert(block.end(), sub.data(), sub.data() + sub.size());
            }
            ctx.send(s, msg::primalScatter, std::move(block));
        }
        std::vector<Vector> out;
        for (int patch : ctx.ownedPatches())
            out.push_back(extract(patch));
        return out;
    }

    const std::vector<double> block = ctx.recv(master, msg::primalScatter);
    std::vector<Vector> out;
    std::size_t off = 0;
    for (int patch : ctx.ownedPatches()) {
        const std::size_t len = gids.at(patch).size();
        if (off + len > block.size())
            throw RuntimeError("scatterPrimal: scattered block size mismatch");
        out.push_back(Eigen::Map<const Vector>(block.data() + off, len));
        off += len;
    }
    if (off != block.size())
        throw RuntimeError("scatterPrimal: scattered block size mismatch");
    return out;
}

/// @brief Assemble the coarse matrix on every holder: each worker sends its
/// per-patch dense blocks to each holder, and holders scatter-add all blocks
/// in global patch order (bitwise invariant across worker and holder counts).
/// Returns the n-by-n matrix on holders, a 0-by-0 matrix elsewhere.
/// Collective.
inline Matrix reduceCoarseMatrix(WorkerContext& ctx, const std::vector<std::vector<int>>& gids,
                                 const std::vector<Matrix>& mine, int n)
{
    WorkerGroup& g = ctx.group();
    const int q = ctx.rank();
    const auto& owned = ctx.ownedPatches();
    if (mine.size() != owned.size())
        throw RuntimeError("reduceCoarseMatrix: one block per owned patch required");
    for (std::size_t i = 0; i < owned.size(); ++i) {
        const int np = static_cast<int>(gids.at(owned[i]).size());
        if (mine[i].rows() != np || mine[i].cols() != np)
            throw RuntimeError("reduceCoarseMatrix: block shape must match the patch gid count");
    }

    std::vector<double> myBlob;
    for (const Matrix& m : mine)
        myBlob.insert(myBlob.end(), m.data(), m.data() + m.size());
    for (int h : g.holders())
        if (h != q)
            ctx.send(h, msg::coarseGather, myBlob);

    if (!g.isHolder(q))
        return Matrix();

    std::vector<std::vector<double>> blobs(g.workerCount());
    for (int w = 0; w < g.workerCount(); ++w)
        if (w != q)
            blobs[w] = ctx.recv(w, msg::coarseGather);

    Matrix S = Matrix::Zero(n, n);
    std::vector<std::size_t> offset(g.workerCount(), 0);
    for (int patch = 0; patch < g.numPatches(); ++patch) {
        const int owner = g.ownerOf(patch);
        const auto& ids = gids.at(patch);
        const int np = static_cast<int>(ids.size());
        const double* data = nullptr;
        if (owner == q) {
            const auto it = std::find(owned.begin(), owned.end(), patch);
            data = mine[it - owned.begin()].data();
        } else {
            if (offset[owner] + static_cast<std::size_t>(np) * np > blobs[owner].size())
                throw RuntimeError("reduceCoarseMatrix: gathered blob size mismatch");
            data = blobs[owner].data() + offset[owner];
            offset[owner] += static_cast<std::size_t>(np) * np;
        }
        for (int j = 0; j < np; ++j)
            for (int i = 0; i < np; ++i)
                S(ids[i], ids[j]) += data[j * np + i];
    }
    return S;
}

/// @brief Preconditioned CG over worker-local multiplier segments: the
/// iterate and search directions live accumulated, residuals distributed,
/// scalar products via the deterministic mixed-representation ddot. Every
/// worker obtains the identical scalar sequence, so the group iterates in
/// lockstep. applyF: accumulated -> distributed; applyM: distributed ->
/// accumulated (both collective). Collective.
template <class OpF, class OpM>
std::pair<DVector, PcgReport> parallelPcg(WorkerContext& ctx, OpF&& applyF, OpM&& applyM,
                                          const DVector& d, double tol, int maxit)
{
    return pcg<DVector>(std::forward<OpF>(applyF), std::forward<OpM>(applyM), d, tol, maxit,
                        [&ctx](const DVector& a, const DVector& b) { return ddot(ctx, a, b); });
}

} // namespace ieti
