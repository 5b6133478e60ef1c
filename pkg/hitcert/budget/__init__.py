# Budget Allocation Module
